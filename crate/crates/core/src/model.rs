//! The full detector: encoder pyramid, cross-scale FPN and the shared heads.

use thiserror::Error;

use crate::config::RunConfig;
use crate::csfpn::Fpn;
use crate::encoder::{AltSettings, Encoder};
use crate::graph::{Graph, Var};
use crate::heads::{self, ConvHead, HeadError, HeadKind, Targets};
use crate::params::{ParamError, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("sequence of {len} steps is too short for {levels} levels (need {required})")]
    SequenceTooShort { len: usize, required: usize, levels: usize },
    #[error("expected {expected} input channels, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pyramid bookkeeping: {0}")]
    PyramidMismatch(String),
}

impl ModelError {
    /// NaN / Inf anywhere in the forward or backward pass.
    pub fn is_numeric(&self) -> bool {
        matches!(self, ModelError::Tensor(TensorError::NonFinite { .. }))
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub encoder: Encoder,
    pub fpn: Fpn,
    pub cls_head: ConvHead,
    pub reg_head: ConvHead,
    pub head_kind: HeadKind,
    pub bins: usize,
    pub num_classes: usize,
}

/// Raw per-location outputs stacked over levels, finest first.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `[N, C]` class logits.
    pub cls_logits: Var,
    /// `[N, 2W]` bin logits or `[N, 2]` pre-softplus offsets.
    pub reg: Var,
    pub geometry: Vec<(usize, usize)>,
}

/// Components of the training objective, each already divided by the
/// normaliser.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub cls: f64,
    pub reg_start: f64,
    pub reg_end: f64,
    /// `λ · (reg_start + reg_end)`.
    pub weighted_reg: f64,
    pub num_positive: usize,
}

/// Decoded per-location predictions for one sequence.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// Row-major `[N, C]` logits.
    pub cls_logits: Vec<f64>,
    pub num_classes: usize,
    /// Offsets in level-stride units.
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
    pub geometry: Vec<(usize, usize)>,
    pub seq_len: usize,
}

impl Detector {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, num_classes: usize) -> Result<Self, ModelError> {
        if num_classes == 0 {
            return Err(ModelError::Config("at least one action class is required".into()));
        }
        let alt = AltSettings {
            ssm: cfg.ssm.clone(),
            sgp: cfg.sgp.clone(),
        };
        let encoder = Encoder::with_settings(store, &cfg.encoder, cfg.backbone_variant, &alt)?;
        let fpn = Fpn::new(store, cfg.encoder.num_levels, cfg.encoder.embed_dim, &cfg.fpn)?;
        let dim = cfg.fpn.out_channels;
        let cls_head = heads::classification_head(store, dim, num_classes)?;
        let reg_head = match cfg.head {
            HeadKind::Bdr => heads::bdr_head(store, dim, cfg.loss.bins)?,
            HeadKind::Baseline => heads::baseline_head(store, dim)?,
        };
        Ok(Self {
            encoder,
            fpn,
            cls_head,
            reg_head,
            head_kind: cfg.head,
            bins: cfg.loss.bins,
            num_classes,
        })
    }

    pub fn forward(&self, g: &mut Graph, features: &Tensor) -> Result<Outputs, ModelError> {
        let x = g.constant(features.clone());
        let backbone = self.encoder.forward(g, x)?;
        // a single level has nothing to fuse and skips straight to refinement
        let pyramid = self.fpn.forward(g, &backbone)?;
        let cls_logits = self.cls_head.forward(g, &pyramid)?;
        let reg = self.reg_head.forward(g, &pyramid)?;
        Ok(Outputs {
            cls_logits,
            reg,
            geometry: pyramid.geometry(),
        })
    }

    /// `(Σ focal + λ Σ reg) / max(1, #positives)` as a scalar node.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &Outputs,
        targets: &Targets,
        loss_cfg: &heads::LossConfig,
    ) -> Result<(Var, LossTerms), ModelError> {
        let n: usize = out.geometry.iter().map(|(len, _)| len).sum();
        if n != targets.locations.len() {
            return Err(ModelError::PyramidMismatch(format!(
                "{} targets for {n} locations",
                targets.locations.len()
            )));
        }
        let focal = g.sigmoid_focal(
            out.cls_logits,
            targets.class_matrix(self.num_classes),
            loss_cfg.focal_alpha,
            loss_cfg.focal_gamma,
        )?;
        let cls = g.sum(focal)?;
        let pos = targets.positive_indices();
        let norm = pos.len().max(1) as f64;
        let mut reg_terms = None;
        if !pos.is_empty() {
            let ds: Vec<f64> = pos.iter().map(|i| targets.locations[*i].d_start).collect();
            let de: Vec<f64> = pos.iter().map(|i| targets.locations[*i].d_end).collect();
            let rows = g.gather_rows(out.reg, pos)?;
            reg_terms = Some(match self.head_kind {
                HeadKind::Bdr => {
                    let s = g.slice_cols(rows, 0, self.bins)?;
                    let e = g.slice_cols(rows, self.bins, 2 * self.bins)?;
                    (heads::dfl_loss_graph(g, s, &ds)?, heads::dfl_loss_graph(g, e, &de)?)
                }
                HeadKind::Baseline => {
                    let d = g.softplus(rows)?;
                    let s = g.slice_cols(d, 0, 1)?;
                    let e = g.slice_cols(d, 1, 2)?;
                    (l1(g, s, &ds)?, l1(g, e, &de)?)
                }
            });
        }
        let (total, terms) = match reg_terms {
            Some((s, e)) => {
                let reg = g.add(s, e)?;
                let reg = g.scale(reg, loss_cfg.lambda_reg)?;
                let sum = g.add(cls, reg)?;
                let total = g.scale(sum, 1.0 / norm)?;
                let terms = LossTerms {
                    total: g.value(total).item(),
                    cls: g.value(cls).item() / norm,
                    reg_start: g.value(s).item() / norm,
                    reg_end: g.value(e).item() / norm,
                    weighted_reg: g.value(reg).item() / norm,
                    num_positive: targets.num_positive(),
                };
                (total, terms)
            }
            None => {
                let total = g.scale(cls, 1.0 / norm)?;
                let terms = LossTerms {
                    total: g.value(total).item(),
                    cls: g.value(total).item(),
                    ..LossTerms::default()
                };
                (total, terms)
            }
        };
        Ok((total, terms))
    }

    /// Forward pass without gradients, reduced to offsets per location.
    pub fn predict(&self, store: &ParamStore, features: &Tensor) -> Result<Predictions, ModelError> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, features)?;
        let n = g.shape(out.reg)[0];
        let (d_start, d_end) = match self.head_kind {
            HeadKind::Bdr => {
                let (ps, pe) = heads::bdr_distributions(&mut g, out.reg, self.bins)?;
                let es = heads::expectation(&mut g, ps)?;
                let ee = heads::expectation(&mut g, pe)?;
                (g.value(es).data().to_vec(), g.value(ee).data().to_vec())
            }
            HeadKind::Baseline => {
                let d = g.softplus(out.reg)?;
                let v = g.value(d).data();
                ((0..n).map(|i| v[2 * i]).collect(), (0..n).map(|i| v[2 * i + 1]).collect())
            }
        };
        Ok(Predictions {
            cls_logits: g.value(out.cls_logits).data().to_vec(),
            num_classes: self.num_classes,
            d_start,
            d_end,
            geometry: out.geometry,
            seq_len: features.rows(),
        })
    }
}

/// `Σ |pred - target|` over a `[P, 1]` column.
fn l1(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var, ModelError> {
    let t = g.constant(Tensor::new([target.len(), 1], target.to_vec())?);
    let diff = g.sub(pred, t)?;
    let a = g.abs(diff)?;
    Ok(g.sum(a)?)
}
