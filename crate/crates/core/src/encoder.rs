//! Input projection, the scaled local-attention Transformer block and the
//! strided backbone pyramid `{C_l}`.

use serde::{Deserialize, Serialize};

use crate::altbackbones::{MambaBlock, SgpBlock, SgpConfig, SsmConfig};
use crate::graph::{Graph, Var};
use crate::model::ModelError;
use crate::nn::{Conv1d, DepthwiseConv1d, LayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Channels of the incoming feature sequence.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Attention extent in timesteps; odd.
    pub window_size: usize,
    pub num_levels: usize,
    pub downsample_stride: usize,
    /// Full-resolution blocks ahead of level 1.
    pub stem_blocks: usize,
    /// Optional per-level head counts (index 0 is level 1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level_heads: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level_mlp_ratio: Option<Vec<usize>>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            embed_dim: 32,
            num_heads: 16,
            mlp_ratio: 6,
            window_size: 31,
            num_levels: 6,
            downsample_stride: 2,
            stem_blocks: 2,
            level_heads: None,
            level_mlp_ratio: None,
        }
    }
}

impl EncoderConfig {
    pub fn heads_at(&self, level: usize) -> usize {
        self.level_heads
            .as_ref()
            .and_then(|v| v.get(level).copied())
            .unwrap_or(self.num_heads)
    }

    pub fn mlp_ratio_at(&self, level: usize) -> usize {
        self.level_mlp_ratio
            .as_ref()
            .and_then(|v| v.get(level).copied())
            .unwrap_or(self.mlp_ratio)
    }

    pub fn radius(&self) -> usize {
        (self.window_size.max(1) - 1) / 2
    }

    /// Returns `(field, problem)` for the first violated invariant.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let bad = |f: &str, m: String| Err((f.to_string(), m));
        if self.input_dim == 0 {
            return bad("input_dim", "must be at least 1".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be at least 1".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(
                "num_heads",
                format!("embed_dim {} is not divisible by {}", self.embed_dim, self.num_heads),
            );
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be at least 1".into());
        }
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return bad("window_size", format!("must be odd and positive, got {}", self.window_size));
        }
        if self.num_levels == 0 {
            return bad("num_levels", "must be at least 1".into());
        }
        if self.downsample_stride == 0 {
            return bad("downsample_stride", "must be at least 1".into());
        }
        if let Some(h) = &self.level_heads {
            if let Some(x) = h.iter().find(|x| **x == 0 || self.embed_dim % **x != 0) {
                return bad("level_heads", format!("embed_dim {} is not divisible by {x}", self.embed_dim));
            }
        }
        if let Some(r) = &self.level_mlp_ratio {
            if r.contains(&0) {
                return bad("level_mlp_ratio", "ratios must be at least 1".into());
            }
        }
        Ok(())
    }
}

/// `(length, stride)` per level: `T_{l+1} = ceil(T_l / s)`, `s_1 = 1`.
pub fn pyramid_geometry(len: usize, levels: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(levels);
    let (mut t, mut s) = (len, 1);
    for _ in 0..levels {
        out.push((t, s));
        t = t.div_ceil(stride);
        s *= stride;
    }
    out
}

/// Shortest sequence accepted by a pyramid of `levels` levels.
pub fn min_sequence_len(levels: usize, stride: usize) -> usize {
    stride.pow(levels.saturating_sub(1) as u32)
}

#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel {
    pub features: Var,
    pub len: usize,
    pub stride: usize,
}

/// Per-level feature maps on one graph, finest first.
#[derive(Clone, Debug, Default)]
pub struct PyramidFeatures {
    pub levels: Vec<PyramidLevel>,
}

impl PyramidFeatures {
    pub fn geometry(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.len, l.stride)).collect()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Two `K = 3` convolutions with GELU, `[T, Din] -> [T, D]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    convs: [Conv1d; 2],
    input_dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, dim: usize) -> Result<Self, ModelError> {
        Ok(Self {
            convs: [
                Conv1d::new(store, &format!("{name}.conv0"), 3, input_dim, dim)?,
                Conv1d::new(store, &format!("{name}.conv1"), 3, dim, dim)?,
            ],
            input_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(ModelError::InputDim {
                expected: self.input_dim,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h)?;
            h = g.gelu(h)?;
        }
        Ok(h)
    }
}

/// Pre-norm block: `x + MSA(LN(x))`, then `+ MLP(LN(.))`, with attention
/// limited to `±radius` steps.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    radius: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        window: usize,
    ) -> Result<Self, ModelError> {
        if heads == 0 || dim % heads != 0 {
            return Err(ModelError::Config(format!("{dim} channels cannot be split into {heads} heads")));
        }
        let hidden = mlp_ratio * dim;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            q: Linear::new(store, &format!("{name}.attn.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.attn.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.attn.v"), dim, dim)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim)?,
            heads,
            radius: (window.max(1) - 1) / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let h = self.ln1.forward(g, x)?;
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let a = g.local_attention(q, k, v, self.heads, self.radius)?;
        let a = self.proj.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Which block family builds the pyramid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    #[default]
    Transformer,
    HybridMamba,
    Sgp,
}

impl BackboneVariant {
    pub const ALL: [BackboneVariant; 3] = [Self::Transformer, Self::HybridMamba, Self::Sgp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Transformer => "transformer",
            Self::HybridMamba => "hybrid_mamba",
            Self::Sgp => "sgp",
        }
    }
}

impl std::str::FromStr for BackboneVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown backbone `{s}` (expected transformer, hybrid_mamba or sgp)"))
    }
}

/// Levels (1-based) at or below this index stay attention-based in the hybrid.
pub const HYBRID_LAST_ATTENTION_LEVEL: usize = 3;

#[derive(Clone, Debug)]
pub enum Block {
    Transformer(TransformerBlock),
    Mamba(MambaBlock),
    Sgp(SgpBlock),
}

impl Block {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        match self {
            Block::Transformer(b) => b.forward(g, x),
            Block::Mamba(b) => b.forward(g, x),
            Block::Sgp(b) => b.forward(g, x),
        }
    }
}

/// Extra block settings used by the alternative backbones.
#[derive(Clone, Debug, Default)]
pub struct AltSettings {
    pub ssm: SsmConfig,
    pub sgp: SgpConfig,
}

/// Embedding, stem and one block per level, with strided depthwise
/// downsampling between levels.
#[derive(Clone, Debug)]
pub struct Encoder {
    embed: Embedding,
    stem: Vec<Block>,
    downsample: Vec<DepthwiseConv1d>,
    levels: Vec<Block>,
    cfg: EncoderConfig,
    variant: BackboneVariant,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, variant: BackboneVariant) -> Result<Self, ModelError> {
        Self::with_settings(store, cfg, variant, &AltSettings::default())
    }

    pub fn with_settings(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        variant: BackboneVariant,
        alt: &AltSettings,
    ) -> Result<Self, ModelError> {
        cfg.validate().map_err(|(f, m)| ModelError::Config(format!("encoder.{f}: {m}")))?;
        let d = cfg.embed_dim;
        let embed = Embedding::new(store, "encoder.embed", cfg.input_dim, d)?;
        // level index used for block selection: the stem counts as level 1
        let make = |store: &mut ParamStore, name: String, level: usize| -> Result<Block, ModelError> {
            let idx = level - 1;
            Ok(match variant {
                BackboneVariant::Sgp => Block::Sgp(SgpBlock::new(store, &name, d, &alt.sgp)?),
                BackboneVariant::HybridMamba if level > HYBRID_LAST_ATTENTION_LEVEL => {
                    Block::Mamba(MambaBlock::new(store, &name, d, &alt.ssm)?)
                }
                _ => Block::Transformer(TransformerBlock::new(
                    store,
                    &name,
                    d,
                    cfg.heads_at(idx),
                    cfg.mlp_ratio_at(idx),
                    cfg.window_size,
                )?),
            })
        };
        let mut stem = Vec::with_capacity(cfg.stem_blocks);
        for i in 0..cfg.stem_blocks {
            stem.push(make(store, format!("encoder.stem.{i}"), 1)?);
        }
        let mut downsample = Vec::new();
        let mut levels = Vec::with_capacity(cfg.num_levels);
        for l in 0..cfg.num_levels {
            if l > 0 {
                downsample.push(DepthwiseConv1d::new(
                    store,
                    &format!("encoder.level{l}.down"),
                    cfg.downsample_stride + 1,
                    d,
                    cfg.downsample_stride,
                )?);
            }
            levels.push(make(store, format!("encoder.level{l}.block"), l + 1)?);
        }
        Ok(Self {
            embed,
            stem,
            downsample,
            levels,
            cfg: cfg.clone(),
            variant,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn variant(&self) -> BackboneVariant {
        self.variant
    }

    pub fn embed(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        self.embed.forward(g, x)
    }

    /// Stem plus per-level blocks on an already embedded `[T, D]` map.
    pub fn build_pyramid(&self, g: &mut Graph, x: Var) -> Result<PyramidFeatures, ModelError> {
        let len = g.shape(x)[0];
        let required = min_sequence_len(self.cfg.num_levels, self.cfg.downsample_stride);
        if len < required {
            return Err(ModelError::SequenceTooShort {
                len,
                required,
                levels: self.cfg.num_levels,
            });
        }
        let mut h = x;
        for b in &self.stem {
            h = b.forward(g, h)?;
        }
        let mut out = PyramidFeatures::default();
        let mut stride = 1;
        for (l, block) in self.levels.iter().enumerate() {
            if l > 0 {
                h = self.downsample[l - 1].forward(g, h)?;
                stride *= self.cfg.downsample_stride;
            }
            h = block.forward(g, h)?;
            out.levels.push(PyramidLevel {
                features: h,
                len: g.shape(h)[0],
                stride,
            });
        }
        Ok(out)
    }

    /// `embed` followed by `build_pyramid`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<PyramidFeatures, ModelError> {
        let e = self.embed(g, x)?;
        self.build_pyramid(g, e)
    }
}
