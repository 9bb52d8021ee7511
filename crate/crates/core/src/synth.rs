//! Seeded synthetic feature sequences with planted, non-overlapping actions.
//!
//! Every sample is a pure function of `(seed, index)`. Randomness comes from
//! ChaCha8 seeded with `seed`; sample `i` draws its content on stream `2i`
//! and its label jitter on stream `2i + 1`, and class means use the last
//! stream. Background frames are `N(0, σ²)` noise; an action of class `c`
//! adds `a(t) μ_c`, where the amplitude `a` ramps linearly over
//! `ramp_scale · boundary_fuzz` steps centred on each boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::Action;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("could not place {count} non-overlapping actions in {len} steps")]
    Placement { count: usize, len: usize },
    #[error("synth.{field}: {msg}")]
    Invalid { field: &'static str, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seq_len: usize,
    pub feat_dim: usize,
    pub num_classes: usize,
    /// Inclusive `(min, max)` count per sequence.
    pub actions_per_seq: (usize, usize),
    /// Inclusive `(min, max)` duration in steps.
    pub duration_range: (usize, usize),
    pub noise_sigma: f64,
    /// Std of the train-label jitter, in steps.
    pub boundary_fuzz: f64,
    /// Ramp length per unit of fuzz; 0 disables signal ramps.
    pub ramp_scale: f64,
    /// Apply label jitter to training annotations.
    pub label_jitter: bool,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            feat_dim: 32,
            num_classes: 10,
            actions_per_seq: (2, 5),
            duration_range: (4, 64),
            noise_sigma: 0.2,
            boundary_fuzz: 0.0,
            ramp_scale: 2.0,
            label_jitter: true,
            seed: 0,
            n_train: 64,
            n_val: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, msg: String| Err(SynthError::Invalid { field, msg });
        if self.seq_len < 2 || self.feat_dim == 0 || self.num_classes == 0 {
            return bad("seq_len", "seq_len >= 2, feat_dim >= 1 and num_classes >= 1 required".into());
        }
        let (dmin, dmax) = self.duration_range;
        if dmin == 0 || dmin > dmax || dmax >= self.seq_len {
            return bad(
                "duration_range",
                format!("need 1 <= min <= max < seq_len ({}), got ({dmin}, {dmax})", self.seq_len),
            );
        }
        let (amin, amax) = self.actions_per_seq;
        if amin > amax {
            return bad("actions_per_seq", format!("min {amin} exceeds max {amax}"));
        }
        if !(self.boundary_fuzz >= 0.0 && self.boundary_fuzz.is_finite()) {
            return bad("boundary_fuzz", format!("must be finite and >= 0, got {}", self.boundary_fuzz));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.ramp_scale < 0.0 {
            return bad("ramp_scale", "must be >= 0".into());
        }
        Ok(())
    }

    pub fn ramp_len(&self) -> f64 {
        self.ramp_scale * self.boundary_fuzz
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub index: usize,
    pub features: Tensor,
    pub clean_actions: Vec<Action>,
    pub jittered_actions: Vec<Action>,
}

const PLACEMENT_TRIES: usize = 1000;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit-norm class means, one row per class.
pub fn class_means(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    (0..cfg.num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..cfg.feat_dim).map(|_| normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

/// Signal amplitude at frame `t` for an action on `[start, end)`.
pub fn amplitude(t: f64, start: f64, end: f64, ramp: f64) -> f64 {
    if ramp <= 0.0 {
        return if t >= start && t < end { 1.0 } else { 0.0 };
    }
    let on = ((t - start) / ramp + 0.5).clamp(0.0, 1.0);
    let off = ((end - t) / ramp + 0.5).clamp(0.0, 1.0);
    on.min(off)
}

fn place_actions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Action>, SynthError> {
    let (amin, amax) = cfg.actions_per_seq;
    let (dmin, dmax) = cfg.duration_range;
    let count = rng.random_range(amin..=amax);
    let last = cfg.seq_len - 1;
    let mut spans: Vec<(usize, usize, usize)> = Vec::with_capacity(count);
    let mut tries = 0;
    while spans.len() < count {
        tries += 1;
        if tries > PLACEMENT_TRIES {
            return Err(SynthError::Placement {
                count,
                len: cfg.seq_len,
            });
        }
        let dur = rng.random_range(dmin..=dmax.min(last));
        let start = rng.random_range(0..=last - dur);
        let end = start + dur;
        let class = rng.random_range(0..cfg.num_classes);
        // keep one background step between neighbours
        if spans.iter().all(|&(s, e, _)| end < s || start > e) {
            spans.push((start, end, class));
        }
    }
    spans.sort_unstable();
    Ok(spans
        .into_iter()
        .map(|(s, e, c)| Action::new(s as f64, e as f64, c))
        .collect())
}

/// Shifts each boundary by `N(0, fuzz²)`, clamps to `[0, len - 1]` and
/// restores `start < end` (minimum length one step).
pub fn jitter(actions: &[Action], fuzz: f64, len: usize, rng: &mut impl Rng) -> Vec<Action> {
    if fuzz == 0.0 {
        return actions.to_vec();
    }
    let hi = (len - 1) as f64;
    actions
        .iter()
        .map(|a| {
            let ds: f64 = StandardNormal.sample(rng);
            let de: f64 = StandardNormal.sample(rng);
            let s = (a.start + fuzz * ds).clamp(0.0, hi);
            let e = (a.end + fuzz * de).clamp(0.0, hi);
            let (mut s, mut e) = if s <= e { (s, e) } else { (e, s) };
            if e - s < 1.0 {
                let mid = ((s + e) / 2.0).clamp(0.5, hi - 0.5);
                s = mid - 0.5;
                e = mid + 0.5;
            }
            Action::new(s, e, a.class)
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig, index: usize) -> Result<SynthSample, SynthError> {
    generate_with_means(cfg, &class_means(cfg), index)
}

pub fn generate_with_means(cfg: &SynthConfig, means: &[Vec<f64>], index: usize) -> Result<SynthSample, SynthError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 2 * index as u64);
    let actions = place_actions(cfg, &mut rng)?;
    let (t, d) = (cfg.seq_len, cfg.feat_dim);
    let mut data = Vec::with_capacity(t * d);
    for _ in 0..t * d {
        data.push(cfg.noise_sigma * normal(&mut rng));
    }
    let ramp = cfg.ramp_len();
    for a in &actions {
        let lo = (a.start - ramp).floor().max(0.0) as usize;
        let hi = ((a.end + ramp).ceil() as usize).min(t);
        for step in lo..hi {
            let w = amplitude(step as f64, a.start, a.end, ramp);
            if w > 0.0 {
                for (x, m) in data[step * d..(step + 1) * d].iter_mut().zip(&means[a.class]) {
                    *x += w * m;
                }
            }
        }
    }
    let jittered = if cfg.label_jitter {
        let mut jrng = stream_rng(cfg.seed, 2 * index as u64 + 1);
        jitter(&actions, cfg.boundary_fuzz, t, &mut jrng)
    } else {
        actions.clone()
    };
    Ok(SynthSample {
        index,
        features: Tensor::new([t, d], data).expect("shape"),
        clean_actions: actions,
        jittered_actions: jittered,
    })
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
}

/// Train uses indices `0..n_train`, validation `n_train..n_train + n_val`.
pub fn make_splits(cfg: &SynthConfig, n_train: usize, n_val: usize) -> Result<Splits, SynthError> {
    use rayon::prelude::*;
    let means = class_means(cfg);
    let build = |range: std::ops::Range<usize>| -> Result<Vec<SynthSample>, SynthError> {
        range.into_par_iter().map(|i| generate_with_means(cfg, &means, i)).collect()
    };
    Ok(Splits {
        train: build(0..n_train)?,
        val: build(n_train..n_train + n_val)?,
    })
}
