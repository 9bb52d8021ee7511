//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Defaults to 5% of `steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// First-moment decay; 0 turns the update momentum-free.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 1500,
            warmup_steps: None,
            batch_size: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        let bad = |f: &str, m: String| Err((f.to_string(), m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        if self.warmup() > self.steps {
            return bad("warmup_steps", format!("{} exceeds steps {}", self.warmup(), self.steps));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || self.grad_clip < 0.0 {
            return bad("eps", "eps must be positive and grad_clip >= 0".into());
        }
        Ok(())
    }
}

/// Learning rate for 0-based `step`.
pub fn lr_at(cfg: &OptimizerConfig, step: usize) -> f64 {
    let warm = cfg.warmup();
    if step < warm {
        return cfg.learning_rate * (step + 1) as f64 / warm as f64;
    }
    let span = (cfg.steps - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// Weight decay applies to tensors of rank 2 and above only.
    pub fn new(store: &ParamStore, cfg: &OptimizerConfig) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let decay = store.iter().map(|(_, _, t)| t.rank() >= 2).collect();
        Self {
            cfg: cfg.clone(),
            m,
            v,
            decay,
            t: 0,
        }
    }

    /// Applies one update with `grads[i]` for parameter `ParamId` index `i`.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Vec<f64>], lr: f64) -> f64 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let s = self.cfg.grad_clip / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = &grads[i];
            if g.is_empty() {
                continue;
            }
            let decay = if self.decay[i] { self.cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *p -= lr * (mh / (vh.sqrt() + self.cfg.eps) + decay * *p);
            }
        }
        norm
    }
}
