//! Shared prediction heads, target assignment and the training losses.
//!
//! The boundary head predicts, for each pyramid location and each side, a
//! distribution over `W` integer offsets (in units of the level stride);
//! the decoded offset is its expectation. Training uses the distribution
//! focal loss on the two bins bracketing the continuous target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::PyramidFeatures;
use crate::graph::{focal_value, Graph, Var, LOG_FLOOR};
use crate::model::ModelError;
use crate::nn::{Conv1d, LayerNorm};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("target offset {d} outside [0, {max}]")]
    OffsetRange { d: f64, max: usize },
    #[error("action [{start}, {end}] outside sequence [0, {len}]")]
    ActionBounds { start: f64, end: f64, len: usize },
    #[error("distribution must have at least 2 bins summing to 1: {0}")]
    Distribution(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Bins per boundary side (`W`).
    pub bins: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            bins: 16,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(("lambda_reg".into(), format!("must be finite and >= 0, got {}", self.lambda_reg)));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(("focal_alpha".into(), format!("must lie in [0, 1], got {}", self.focal_alpha)));
        }
        if self.focal_gamma < 0.0 {
            return Err(("focal_gamma".into(), format!("must be >= 0, got {}", self.focal_gamma)));
        }
        if self.bins < 2 {
            return Err(("bins".into(), format!("need at least 2 bins, got {}", self.bins)));
        }
        Ok(())
    }
}

/// Which boundary regressor the detector carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Distribution over `W` bins, trained with DFL.
    #[default]
    Bdr,
    /// One positive scalar per side, trained with L1.
    Baseline,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Bdr => "bdr",
            HeadKind::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Start,
    End,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryDistribution {
    probs: Vec<f64>,
    pub side: Side,
}

impl BoundaryDistribution {
    pub fn new(probs: Vec<f64>, side: Side) -> Result<Self, HeadError> {
        let total: f64 = probs.iter().sum();
        if probs.len() < 2 || probs.iter().any(|p| *p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(HeadError::Distribution(format!("{} bins, sum {total}", probs.len())));
        }
        Ok(Self { probs, side })
    }

    pub fn from_logits(logits: &[f64], side: Side) -> Result<Self, HeadError> {
        let mut p = logits.to_vec();
        crate::graph::softmax_in_place(&mut p);
        Self::new(p, side)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    /// `Σ i · p(i)`.
    pub fn expectation(&self) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
    }
}

/// Lower bin and the weights `(i + 1 - d, d - i)` on bins `i`, `i + 1`.
/// At `d = W - 1` the pair is `(W - 2, W - 1)` with full weight on the last bin.
pub fn dfl_bins(d: f64, bins: usize) -> Result<(usize, f64, f64), HeadError> {
    let max = bins - 1;
    if !(0.0..=max as f64).contains(&d) {
        return Err(HeadError::OffsetRange { d, max });
    }
    let i = (d.floor() as usize).min(bins - 2);
    Ok((i, i as f64 + 1.0 - d, d - i as f64))
}

/// `-((i + 1 - d) ln p(i) + (d - i) ln p(i + 1))`, probabilities clamped at 1e-12.
pub fn dfl_loss(dist: &BoundaryDistribution, d_gt: f64) -> Result<f64, HeadError> {
    let (i, wl, wr) = dfl_bins(d_gt, dist.bins())?;
    let ln = |p: f64| p.max(LOG_FLOOR).ln();
    Ok(0.0 - (wl * ln(dist.probs[i]) + wr * ln(dist.probs[i + 1])))
}

/// Sigmoid focal loss for one logit and a `{0, 1}` label.
pub fn focal_loss(logit: f64, label: bool, alpha: f64, gamma: f64) -> f64 {
    focal_value(logit, if label { 1.0 } else { 0.0 }, alpha, gamma)
}

/// `(Σ focal + λ Σ (dfl_s + dfl_e)) / normalizer`.
pub fn total_loss(cls_sum: f64, dfl_start: f64, dfl_end: f64, lambda_reg: f64, normalizer: f64) -> f64 {
    (cls_sum + lambda_reg * (dfl_start + dfl_end)) / normalizer
}

/// Expectation of each row of a `[P, W]` probability matrix, as `[P, 1]`.
pub fn expectation(g: &mut Graph, probs: Var) -> Result<Var, ModelError> {
    let w = g.shape(probs)[1];
    let bins = g.constant(Tensor::new([w, 1], (0..w).map(|i| i as f64).collect()).expect("shape"));
    Ok(g.matmul(probs, bins)?)
}

/// Summed DFL over rows of `logits: [P, W]` against `targets[P]`.
pub fn dfl_loss_graph(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var, ModelError> {
    let w = g.shape(logits)[1];
    let mut weights = vec![0.0; targets.len() * w];
    for (r, d) in targets.iter().enumerate() {
        let (i, wl, wr) = dfl_bins(*d, w)?;
        weights[r * w + i] = wl;
        weights[r * w + i + 1] = wr;
    }
    let weights = g.constant(Tensor::new([targets.len(), w], weights).expect("shape"));
    let logp = g.log_softmax(logits)?;
    let weighted = g.mul(logp, weights)?;
    let s = g.sum(weighted)?;
    Ok(g.scale(s, -1.0)?)
}

/// Three `K = 3` conv + LayerNorm + GELU layers, then a 1×1 projection.
/// Weights are shared across pyramid levels.
#[derive(Clone, Debug)]
pub struct ConvHead {
    trunk: Vec<(Conv1d, LayerNorm)>,
    out: Conv1d,
}

pub const HEAD_DEPTH: usize = 3;

impl ConvHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, outputs: usize) -> Result<Self, ModelError> {
        let mut trunk = Vec::with_capacity(HEAD_DEPTH);
        for i in 0..HEAD_DEPTH {
            trunk.push((
                Conv1d::new(store, &format!("{name}.conv{i}"), 3, dim, dim)?,
                LayerNorm::new(store, &format!("{name}.norm{i}"), dim)?,
            ));
        }
        let out = Conv1d::new(store, &format!("{name}.out"), 1, dim, outputs)?;
        Ok(Self { trunk, out })
    }

    pub fn out_layer(&self) -> &Conv1d {
        &self.out
    }

    pub fn forward_level(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let mut h = x;
        for (conv, norm) in &self.trunk {
            h = conv.forward(g, h)?;
            h = norm.forward(g, h)?;
            h = g.gelu(h)?;
        }
        Ok(self.out.forward(g, h)?)
    }

    /// Per-level outputs stacked in level order: `[Σ T_l, outputs]`.
    pub fn forward(&self, g: &mut Graph, pyramid: &PyramidFeatures) -> Result<Var, ModelError> {
        let mut parts = Vec::with_capacity(pyramid.len());
        for level in &pyramid.levels {
            parts.push(self.forward_level(g, level.features)?);
        }
        Ok(g.concat_rows(&parts)?)
    }
}

/// Initial foreground probability for classification logits.
pub const CLS_PRIOR: f64 = 0.01;

/// Classification head: raw class logits per location (sigmoid at decode).
pub fn classification_head(store: &mut ParamStore, dim: usize, num_classes: usize) -> Result<ConvHead, ModelError> {
    let head = ConvHead::new(store, "head.cls", dim, num_classes)?;
    let bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
    store.get_mut(head.out.bias).data_mut().iter_mut().for_each(|b| *b = bias);
    Ok(head)
}

/// Boundary distribution head: `2W` logits per location, start bins first.
pub fn bdr_head(store: &mut ParamStore, dim: usize, bins: usize) -> Result<ConvHead, ModelError> {
    ConvHead::new(store, "head.bdr", dim, 2 * bins)
}

/// Scalar offset head: 2 pre-softplus values per location.
pub fn baseline_head(store: &mut ParamStore, dim: usize) -> Result<ConvHead, ModelError> {
    ConvHead::new(store, "head.offset", dim, 2)
}

/// Splits `[N, 2W]` logits and turns each half into row distributions.
pub fn bdr_distributions(g: &mut Graph, logits: Var, bins: usize) -> Result<(Var, Var), ModelError> {
    let s = g.slice_cols(logits, 0, bins)?;
    let e = g.slice_cols(logits, bins, 2 * bins)?;
    Ok((g.softmax(s)?, g.softmax(e)?))
}

/// An annotated action on the base grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

impl Action {
    pub fn new(start: f64, end: f64, class: usize) -> Self {
        Self { start, end, class }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionTarget {
    /// Start offset in level-stride units.
    pub d_start: f64,
    pub d_end: f64,
    /// `None` for background.
    pub class: Option<usize>,
}

impl RegressionTarget {
    pub const BACKGROUND: Self = Self {
        d_start: 0.0,
        d_end: 0.0,
        class: None,
    };

    pub fn positive(&self) -> bool {
        self.class.is_some()
    }
}

/// Per-level `(lo, hi]` bounds on the larger of the two offsets, in base-grid
/// steps: `(0, 4], (4, 8], (8, 16], ...` with the last level open-ended.
pub fn regression_ranges(levels: usize) -> Vec<(f64, f64)> {
    (0..levels)
        .map(|l| {
            let lo = if l == 0 { 0.0 } else { 4.0 * 2f64.powi(l as i32 - 1) };
            let hi = if l + 1 == levels { f64::INFINITY } else { 4.0 * 2f64.powi(l as i32) };
            (lo, hi)
        })
        .collect()
}

/// Targets for every location of every level, flattened finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub locations: Vec<RegressionTarget>,
    /// `(len, stride)` per level.
    pub geometry: Vec<(usize, usize)>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.locations.iter().filter(|t| t.positive()).count()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.locations.len()).filter(|i| self.locations[*i].positive()).collect()
    }

    /// `(level, j)` of flattened location `idx`.
    pub fn level_of(&self, idx: usize) -> (usize, usize) {
        let mut off = 0;
        for (l, (len, _)) in self.geometry.iter().enumerate() {
            if idx < off + len {
                return (l, idx - off);
            }
            off += len;
        }
        panic!("location {idx} out of range");
    }

    /// Dense `{0, 1}` classification targets `[N, num_classes]`.
    pub fn class_matrix(&self, num_classes: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.locations.len() * num_classes];
        for (i, t) in self.locations.iter().enumerate() {
            if let Some(c) = t.class {
                out[i * num_classes + c] = 1.0;
            }
        }
        out
    }
}

/// A location `c = j · s_l` is positive for an action when it lies inside
/// it and the larger offset falls in the level's range. Overlapping claims
/// go to the shortest action; offsets are clamped to `[0, W - 1]`.
pub fn assign_targets(
    actions: &[Action],
    geometry: &[(usize, usize)],
    seq_len: usize,
    bins: usize,
) -> Result<Targets, HeadError> {
    for a in actions {
        if !(a.start >= 0.0 && a.end <= seq_len as f64 && a.end >= a.start) {
            return Err(HeadError::ActionBounds {
                start: a.start,
                end: a.end,
                len: seq_len,
            });
        }
    }
    let ranges = regression_ranges(geometry.len());
    let max_d = (bins - 1) as f64;
    let mut locations = Vec::with_capacity(geometry.iter().map(|g| g.0).sum());
    for (l, &(len, stride)) in geometry.iter().enumerate() {
        let s = stride as f64;
        let (lo, hi) = ranges[l];
        let mut level = vec![(RegressionTarget::BACKGROUND, f64::INFINITY); len];
        for a in actions {
            let first = (a.start / s).ceil().max(0.0) as usize;
            let last = ((a.end / s).floor() as usize).min(len.saturating_sub(1));
            for (j, slot) in level.iter_mut().enumerate().take(last + 1).skip(first) {
                let c = j as f64 * s;
                let (ds, de) = (c - a.start, a.end - c);
                let m = ds.max(de);
                if m > lo && m <= hi && a.duration() < slot.1 {
                    *slot = (
                        RegressionTarget {
                            d_start: (ds / s).clamp(0.0, max_d),
                            d_end: (de / s).clamp(0.0, max_d),
                            class: Some(a.class),
                        },
                        a.duration(),
                    );
                }
            }
        }
        locations.extend(level.into_iter().map(|(t, _)| t));
    }
    Ok(Targets {
        locations,
        geometry: geometry.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectation_examples() {
        let one_hot = BoundaryDistribution::new(vec![0.0, 0.0, 0.0, 1.0, 0.0], Side::Start).unwrap();
        assert_eq!(one_hot.expectation(), 3.0);
        let uniform = BoundaryDistribution::new(vec![0.25; 4], Side::End).unwrap();
        assert_eq!(uniform.expectation(), 1.5);
        let two = BoundaryDistribution::new(vec![0.2, 0.8], Side::Start).unwrap();
        assert!((two.expectation() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn distribution_validation() {
        assert!(BoundaryDistribution::new(vec![1.0], Side::Start).is_err());
        assert!(BoundaryDistribution::new(vec![0.5, 0.6], Side::Start).is_err());
        assert!(BoundaryDistribution::new(vec![-0.1, 1.1], Side::Start).is_err());
    }

    #[test]
    fn saturated_logit_expectation() {
        let mut logits = vec![0.0; 8];
        logits[3] = 1000.0;
        let d = BoundaryDistribution::from_logits(&logits, Side::Start).unwrap();
        assert!((d.expectation() - 3.0).abs() < 1e-9);
        let zero = BoundaryDistribution::from_logits(&[0.0; 8], Side::End).unwrap();
        assert!((zero.expectation() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn dfl_examples() {
        let mut p = vec![0.0; 6];
        p[2] = 1.0;
        let d = BoundaryDistribution::new(p, Side::Start).unwrap();
        assert_eq!(dfl_loss(&d, 2.0).unwrap(), 0.0);

        let d = BoundaryDistribution::new(vec![0.0, 0.5, 0.5, 0.0], Side::Start).unwrap();
        assert!((dfl_loss(&d, 1.5).unwrap() - 2f64.ln()).abs() < 1e-12);

        let d = BoundaryDistribution::new(vec![0.9, 0.1], Side::Start).unwrap();
        let expected = -(0.75 * 0.9f64.ln() + 0.25 * 0.1f64.ln());
        let got = dfl_loss(&d, 0.25).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.6547).abs() < 1e-4);
    }

    #[test]
    fn dfl_at_last_bin_and_out_of_range() {
        assert_eq!(dfl_bins(3.0, 4).unwrap(), (2, 0.0, 1.0));
        let d = BoundaryDistribution::new(vec![0.0, 0.0, 0.0, 1.0], Side::End).unwrap();
        assert_eq!(dfl_loss(&d, 3.0).unwrap(), 0.0);
        assert!(matches!(dfl_bins(3.5, 4), Err(HeadError::OffsetRange { .. })));
        assert!(matches!(dfl_bins(-0.1, 4), Err(HeadError::OffsetRange { .. })));
    }

    #[test]
    fn dfl_zero_probability_is_clamped() {
        let d = BoundaryDistribution::new(vec![1.0, 0.0, 0.0], Side::Start).unwrap();
        let v = dfl_loss(&d, 1.0).unwrap();
        assert!((v + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn focal_examples() {
        let v = focal_loss(0.0, true, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.04332).abs() < 1e-5);
        assert!(focal_loss(30.0, true, 0.25, 2.0) < 1e-20);
        for z in [-3.0, -0.2, 0.0, 1.7] {
            for y in [true, false] {
                let p = crate::graph::sigmoid(z);
                let bce = if y { -p.ln() } else { -(1.0 - p).ln() };
                assert!((focal_loss(z, y, 0.5, 0.0) - 0.5 * bce).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(0.2, 0.3, 0.5, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.0, 0.0, 1.0, 1.0), 0.7);
        assert_eq!(total_loss(0.7, 3.0, 9.0, 0.0, 1.0), 0.7);
    }

    #[test]
    fn ranges_match_level_table() {
        let r = regression_ranges(6);
        assert_eq!(&r[..5], &[(0.0, 4.0), (4.0, 8.0), (8.0, 16.0), (16.0, 32.0), (32.0, 64.0)]);
        assert_eq!(r[5].0, 64.0);
        assert!(r[5].1.is_infinite());
        assert_eq!(regression_ranges(1), vec![(0.0, f64::INFINITY)]);
    }

    #[test]
    fn symmetric_center_target() {
        let geom = crate::encoder::pyramid_geometry(16, 1, 2);
        let mut t = assign_targets(&[Action::new(0.0, 8.0, 2)], &geom, 16, 16).unwrap();
        let at4 = t.locations[4];
        assert_eq!((at4.d_start, at4.d_end, at4.class), (4.0, 4.0, Some(2)));
        assert_eq!(t.locations[12], RegressionTarget::BACKGROUND);
        t.locations.clear();
    }

    #[test]
    fn long_action_skips_fine_level() {
        let geom = crate::encoder::pyramid_geometry(128, 6, 2);
        let t = assign_targets(&[Action::new(20.0, 60.0, 0)], &geom, 128, 16).unwrap();
        assert!(t.locations[..128].iter().all(|x| !x.positive()));
        assert!(t.num_positive() > 0);
    }

    #[test]
    fn out_of_bounds_action_rejected() {
        let geom = crate::encoder::pyramid_geometry(16, 2, 2);
        assert!(assign_targets(&[Action::new(3.0, 17.0, 0)], &geom, 16, 16).is_err());
        assert!(assign_targets(&[Action::new(-1.0, 4.0, 0)], &geom, 16, 16).is_err());
        assert!(assign_targets(&[Action::new(5.0, 4.0, 0)], &geom, 16, 16).is_err());
    }
}
