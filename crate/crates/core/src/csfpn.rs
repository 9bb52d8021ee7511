//! Cross-scale feature pyramid: top-down pathway with lateral 1×1
//! connections, `P_i = Conv1x1(C_i) + Upsample(P_{i+1})`, followed by a
//! per-level refinement convolution.

use serde::{Deserialize, Serialize};

use crate::encoder::{PyramidFeatures, PyramidLevel};
use crate::graph::{Graph, Var};
use crate::model::ModelError;
use crate::nn::Conv1d;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpnConfig {
    pub out_channels: usize,
    pub upsample_mode: UpsampleMode,
    pub refine_kernel: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self {
            out_channels: 32,
            upsample_mode: UpsampleMode::Nearest,
            refine_kernel: 3,
        }
    }
}

impl FpnConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.out_channels == 0 {
            return Err(("out_channels".into(), "must be at least 1".into()));
        }
        if self.refine_kernel % 2 == 0 {
            return Err(("refine_kernel".into(), format!("must be odd, got {}", self.refine_kernel)));
        }
        Ok(())
    }
}

/// Source row for each output row: `floor(j * len / target)`.
pub fn nearest_index(len: usize, target: usize) -> Vec<usize> {
    (0..target).map(|j| j * len / target).collect()
}

/// Nearest-neighbour temporal upsampling of `x: [T, D]` to `target` rows.
pub fn upsample_nearest(g: &mut Graph, x: Var, target: usize) -> Result<Var, ModelError> {
    let len = g.shape(x)[0];
    if target < len {
        return Err(ModelError::Config(format!("cannot upsample {len} rows to {target}")));
    }
    Ok(g.gather_rows(x, nearest_index(len, target))?)
}

/// `Conv1x1(c_i) + p_up`, element-wise.
pub fn fuse_level(g: &mut Graph, c_i: Var, p_up: Var, lateral: &Conv1d) -> Result<Var, ModelError> {
    let (lc, lp) = (g.shape(c_i)[0], g.shape(p_up)[0]);
    if lc != lp {
        return Err(ModelError::PyramidMismatch(format!(
            "lateral map has {lc} rows, upsampled map has {lp}"
        )));
    }
    let lat = lateral.forward(g, c_i)?;
    Ok(g.add(lat, p_up)?)
}

#[derive(Clone, Debug)]
pub struct Fpn {
    laterals: Vec<Conv1d>,
    refines: Vec<Conv1d>,
}

impl Fpn {
    pub fn new(store: &mut ParamStore, levels: usize, in_channels: usize, cfg: &FpnConfig) -> Result<Self, ModelError> {
        cfg.validate().map_err(|(f, m)| ModelError::Config(format!("fpn.{f}: {m}")))?;
        let mut laterals = Vec::with_capacity(levels);
        let mut refines = Vec::with_capacity(levels);
        for l in 0..levels {
            laterals.push(Conv1d::new(store, &format!("fpn.lateral{l}"), 1, in_channels, cfg.out_channels)?);
            refines.push(Conv1d::new(
                store,
                &format!("fpn.refine{l}"),
                cfg.refine_kernel,
                cfg.out_channels,
                cfg.out_channels,
            )?);
        }
        Ok(Self { laterals, refines })
    }

    pub fn lateral(&self, level: usize) -> &Conv1d {
        &self.laterals[level]
    }

    pub fn refine(&self, level: usize) -> &Conv1d {
        &self.refines[level]
    }

    /// Top-down fusion over every level; lengths and strides are unchanged.
    pub fn build_fpn(&self, g: &mut Graph, backbone: &PyramidFeatures) -> Result<PyramidFeatures, ModelError> {
        let n = backbone.len();
        if n < 2 {
            return Err(ModelError::PyramidMismatch(format!("top-down fusion needs at least 2 levels, got {n}")));
        }
        self.forward(g, backbone)
    }

    /// Same as [`build_fpn`](Self::build_fpn) but also accepts a single level,
    /// which reduces to lateral projection plus refinement.
    pub fn forward(&self, g: &mut Graph, backbone: &PyramidFeatures) -> Result<PyramidFeatures, ModelError> {
        let n = backbone.len();
        if n == 0 || n != self.laterals.len() {
            return Err(ModelError::PyramidMismatch(format!(
                "pyramid has {n} levels, fpn was built for {}",
                self.laterals.len()
            )));
        }
        let mut merged = vec![None; n];
        let top = self.laterals[n - 1].forward(g, backbone.levels[n - 1].features)?;
        merged[n - 1] = Some(top);
        for i in (0..n - 1).rev() {
            let coarse = merged[i + 1].expect("filled top-down");
            let up = upsample_nearest(g, coarse, backbone.levels[i].len)?;
            merged[i] = Some(fuse_level(g, backbone.levels[i].features, up, &self.laterals[i])?);
        }
        let mut out = PyramidFeatures::default();
        for (i, m) in merged.into_iter().enumerate() {
            let p = self.refines[i].forward(g, m.expect("filled"))?;
            out.levels.push(PyramidLevel {
                features: p,
                len: backbone.levels[i].len,
                stride: backbone.levels[i].stride,
            });
        }
        Ok(out)
    }
}
