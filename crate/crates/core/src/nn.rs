//! Parameterised layers. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and emits graph operations in `forward`.

use crate::graph::{Graph, Var};
use crate::params::{ParamError, ParamId, ParamStore};
use crate::tensor::Result;

/// Std of truncated-normal projection weights.
pub const PROJ_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self, ParamError> {
        Self::with_std(store, name, din, dout, PROJ_STD)
    }

    pub fn with_std(store: &mut ParamStore, name: &str, din: usize, dout: usize, std: f64) -> Result<Self, ParamError> {
        Ok(Self {
            weight: store.trunc_normal(format!("{name}.weight"), &[din, dout], std)?,
            bias: store.zeros(format!("{name}.bias"), &[dout])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Dense 1-D convolution, kernel `[K, Din, Dout]`, "same" padding when stride is 1.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    /// Fan-in scaled truncated-normal kernel, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize, din: usize, dout: usize) -> Result<Self, ParamError> {
        let std = (1.0 / (kernel * din) as f64).sqrt();
        Ok(Self {
            weight: store.trunc_normal(format!("{name}.weight"), &[kernel, din, dout], std)?,
            bias: store.zeros(format!("{name}.bias"), &[dout])?,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Per-channel convolution with kernel `[K, D]`. Even kernels pad one more
/// step on the right.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl DepthwiseConv1d {
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize, channels: usize, stride: usize) -> Result<Self, ParamError> {
        let std = (1.0 / kernel as f64).sqrt();
        Ok(Self {
            weight: store.trunc_normal(format!("{name}.weight"), &[kernel, channels], std)?,
            bias: store.zeros(format!("{name}.bias"), &[channels])?,
            kernel,
            stride,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let pad_l = (self.kernel - 1) / 2;
        let pad_r = self.kernel - 1 - pad_l;
        g.depthwise_conv1d(x, w, Some(b), self.stride, pad_l, pad_r)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, ParamError> {
        Ok(Self {
            gamma: store.full(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.zeros(format!("{name}.beta"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Sets every parameter whose name contains `.bias` (or `.beta`) to zero.
pub fn zero_biases(store: &mut ParamStore) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, n, _)| n.ends_with(".bias") || n.ends_with(".beta"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
