//! Alternative pyramid blocks: a selective state-space (Mamba-style) block
//! and the SGP convolutional block. Both are drop-in replacements for
//! [`TransformerBlock`](crate::encoder::TransformerBlock) inside the
//! [`Encoder`].

use serde::{Deserialize, Serialize};

use crate::encoder::{AltSettings, BackboneVariant, Encoder, EncoderConfig};
use crate::graph::{sigmoid, Graph, Var};
use crate::kernels;
use crate::model::ModelError;
use crate::nn::{DepthwiseConv1d, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    pub state_dim: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self { state_dim: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgpConfig {
    /// Width of the short depthwise convolution.
    pub w: usize,
    /// Multiplier for the long convolution width `k * w`.
    pub k: usize,
}

impl Default for SgpConfig {
    fn default() -> Self {
        Self { w: 3, k: 3 }
    }
}

/// Single-channel selective SSM parameters. `B̄_k = b_weight * x_k + b_bias`
/// and `C_k = c_weight * x_k + c_bias`, element-wise over the state.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_bar: Vec<f64>,
    pub b_weight: Vec<f64>,
    pub b_bias: Vec<f64>,
    pub c_weight: Vec<f64>,
    pub c_bias: Vec<f64>,
}

impl SsmParams {
    /// Input-independent `B̄`, `C`.
    pub fn fixed(a_bar: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Self {
        let n = a_bar.len();
        Self {
            a_bar,
            b_weight: vec![0.0; n],
            b_bias: b,
            c_weight: vec![0.0; n],
            c_bias: c,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.len()
    }

    /// Maps unconstrained decay logits into `(0, 1)`.
    pub fn squash(logits: &[f64]) -> Vec<f64> {
        logits.iter().map(|v| sigmoid(*v)).collect()
    }
}

/// `h_k = Ā h_{k-1} + B̄_k x_k`, `y_k = C_k · h_k`, `h_0 = 0`.
pub fn ssm_scan(x: &[f64], p: &SsmParams) -> Vec<f64> {
    let n = p.state_dim();
    let mut b = Vec::with_capacity(x.len() * n);
    let mut c = Vec::with_capacity(x.len() * n);
    for &xk in x {
        b.extend((0..n).map(|i| p.b_weight[i] * xk + p.b_bias[i]));
        c.extend((0..n).map(|i| p.c_weight[i] * xk + p.c_bias[i]));
    }
    kernels::selective_scan_forward(x, &p.a_bar, &b, &c, x.len(), 1, n).0
}

/// `x + W_out( SSM(silu(x_in)) ⊙ silu(z) )` with `[x_in, z] = W_in LN(x)` and
/// input-dependent `B̄_k`, `C_k`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    norm: LayerNorm,
    in_x: Linear,
    in_z: Linear,
    b_proj: Linear,
    c_proj: Linear,
    a_logit: ParamId,
    out: Linear,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: &SsmConfig) -> Result<Self, ModelError> {
        let n = cfg.state_dim.max(1);
        // decays spread over (0.5, 0.95) per state slot
        let logits: Vec<f64> = (0..dim * n)
            .map(|i| {
                let a = 0.5 + 0.45 * (i % n) as f64 / (n.max(2) - 1) as f64;
                (a / (1.0 - a)).ln()
            })
            .collect();
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
            in_x: Linear::new(store, &format!("{name}.ssm.in_x"), dim, dim)?,
            in_z: Linear::new(store, &format!("{name}.ssm.in_z"), dim, dim)?,
            b_proj: Linear::with_std(store, &format!("{name}.ssm.b_proj"), dim, n, 0.2)?,
            c_proj: Linear::with_std(store, &format!("{name}.ssm.c_proj"), dim, n, 0.2)?,
            a_logit: store.insert(format!("{name}.ssm.a_logit"), Tensor::new([dim, n], logits).expect("shape"))?,
            out: Linear::new(store, &format!("{name}.ssm.out"), dim, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let h = self.norm.forward(g, x)?;
        let xi = self.in_x.forward(g, h)?;
        let xs = g.silu(xi)?;
        let z = self.in_z.forward(g, h)?;
        let gate = g.silu(z)?;
        let b = self.b_proj.forward(g, xs)?;
        let c = self.c_proj.forward(g, xs)?;
        let a_logit = g.param(self.a_logit);
        let a = g.sigmoid(a_logit)?;
        let y = g.selective_scan(xs, a, b, c)?;
        let y = g.mul(y, gate)?;
        let y = self.out.forward(g, y)?;
        Ok(g.add(x, y)?)
    }
}

/// `φ(x) ⊙ FC(x) + ψ(x) ⊙ (Conv_w(x) + Conv_kw(x)) + x` with sigmoid gates.
#[derive(Clone, Debug)]
pub struct SgpBlock {
    pub phi: Linear,
    pub psi: Linear,
    pub fc: Linear,
    pub conv_w: DepthwiseConv1d,
    pub conv_kw: DepthwiseConv1d,
}

impl SgpBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: &SgpConfig) -> Result<Self, ModelError> {
        if cfg.w == 0 || cfg.k < 2 {
            return Err(ModelError::Config(format!("sgp widths need w >= 1 and k >= 2, got w={} k={}", cfg.w, cfg.k)));
        }
        Ok(Self {
            phi: Linear::new(store, &format!("{name}.sgp.phi"), dim, dim)?,
            psi: Linear::new(store, &format!("{name}.sgp.psi"), dim, dim)?,
            fc: Linear::new(store, &format!("{name}.sgp.fc"), dim, dim)?,
            conv_w: DepthwiseConv1d::new(store, &format!("{name}.sgp.conv_w"), cfg.w, dim, 1)?,
            conv_kw: DepthwiseConv1d::new(store, &format!("{name}.sgp.conv_kw"), cfg.k * cfg.w, dim, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let phi = self.phi.forward(g, x)?;
        let phi = g.sigmoid(phi)?;
        let psi = self.psi.forward(g, x)?;
        let psi = g.sigmoid(psi)?;
        let fc = self.fc.forward(g, x)?;
        let instant = g.mul(phi, fc)?;
        let cw = self.conv_w.forward(g, x)?;
        let ckw = self.conv_kw.forward(g, x)?;
        let window = g.add(cw, ckw)?;
        let window = g.mul(psi, window)?;
        let y = g.add(instant, window)?;
        Ok(g.add(y, x)?)
    }
}

/// Encoder whose pyramid uses the hybrid attention/Mamba or the SGP blocks.
/// Geometry is identical to the Transformer pyramid.
pub fn alt_encoder(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    variant: BackboneVariant,
    alt: &AltSettings,
) -> Result<Encoder, ModelError> {
    Encoder::with_settings(store, cfg, variant, alt)
}
