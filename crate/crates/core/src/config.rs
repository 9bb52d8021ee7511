//! Run configuration: a TOML document whose sections mirror [`RunConfig`].
//! Missing keys take their defaults, unknown keys are rejected, and
//! `key.path=value` overrides are applied to the parsed document before it is
//! interpreted. Override values are read as TOML scalars or arrays; anything
//! that does not parse is taken as a bare string.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::altbackbones::{SgpConfig, SsmConfig};
use crate::csfpn::FpnConfig;
use crate::encoder::{min_sequence_len, BackboneVariant, EncoderConfig};
use crate::heads::{HeadKind, LossConfig};
use crate::optim::OptimizerConfig;
use crate::postproc::EvalConfig;
use crate::synth::SynthConfig;

pub const SEED_ENV: &str = "TBT_SEED";
pub const ECHO_FILE: &str = "effective_config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Optional on-disk dataset; the synthetic benchmark is used when
/// `annotations` is unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    pub train_subset: String,
    pub val_subset: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            annotations: None,
            train_subset: "train".into(),
            val_subset: "val".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone_variant: BackboneVariant,
    pub head: HeadKind,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub fpn: FpnConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub ssm: SsmConfig,
    pub sgp: SgpConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone_variant: BackboneVariant::Transformer,
            head: HeadKind::Bdr,
            output_dir: PathBuf::from("runs/default"),
            encoder: EncoderConfig::default(),
            fpn: FpnConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            ssm: SsmConfig::default(),
            sgp: SgpConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let at = |section: &'static str| move |(f, m): (String, String)| ConfigError::Invalid {
            field: format!("{section}.{f}"),
            msg: m,
        };
        self.encoder.validate().map_err(at("encoder"))?;
        self.fpn.validate().map_err(at("fpn"))?;
        self.loss.validate().map_err(at("loss"))?;
        self.eval.validate().map_err(at("eval"))?;
        self.optimizer.validate().map_err(at("optimizer"))?;
        self.synth.validate().map_err(|e| match e {
            crate::synth::SynthError::Invalid { field, msg } => ConfigError::Invalid {
                field: format!("synth.{field}"),
                msg,
            },
            other => ConfigError::Invalid {
                field: "synth".into(),
                msg: other.to_string(),
            },
        })?;
        if self.data.annotations.is_none() {
            if self.synth.feat_dim != self.encoder.input_dim {
                return Err(ConfigError::Invalid {
                    field: "encoder.input_dim".into(),
                    msg: format!("{} does not match synth.feat_dim {}", self.encoder.input_dim, self.synth.feat_dim),
                });
            }
            let need = min_sequence_len(self.encoder.num_levels, self.encoder.downsample_stride);
            if self.synth.seq_len < need {
                return Err(ConfigError::Invalid {
                    field: "synth.seq_len".into(),
                    msg: format!(
                        "{} steps cannot feed {} levels (need {need})",
                        self.synth.seq_len, self.encoder.num_levels
                    ),
                });
            }
        }
        if self.ssm.state_dim == 0 {
            return Err(ConfigError::Invalid {
                field: "ssm.state_dim".into(),
                msg: "must be at least 1".into(),
            });
        }
        if self.sgp.w == 0 || self.sgp.k < 2 {
            return Err(ConfigError::Invalid {
                field: "sgp".into(),
                msg: format!("need w >= 1 and k >= 2, got w={} k={}", self.sgp.w, self.sgp.k),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Writes the effective config into `output_dir`.
    pub fn echo(&self) -> Result<PathBuf, ConfigError> {
        let path = self.output_dir.join(ECHO_FILE);
        let werr = |source| ConfigError::Write {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(&self.output_dir).map_err(werr)?;
        fs::write(&path, self.to_toml()).map_err(werr)?;
        Ok(path)
    }

    /// Replaces `seed` with the value of `TBT_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| ConfigError::Invalid {
                field: SEED_ENV.into(),
                msg: format!("`{v}` is not an unsigned integer"),
            })?;
        }
        Ok(())
    }
}

fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Sets `dotted.key = value` inside `table`, creating sections as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Override(format!("{assignment} (`{p}` is not a section)"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Parses a config document, applies overrides, fills defaults, adjusts an
/// even attention window to the next odd value, and validates.
pub fn parse_config_str<S: AsRef<str>>(text: &str, overrides: &[S], origin: &Path) -> Result<RunConfig, ConfigError> {
    let perr = |msg: String| ConfigError::Parse {
        path: origin.to_path_buf(),
        msg,
    };
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| perr(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o.as_ref())?;
    }
    let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| perr(e.to_string()))?;
    if cfg.encoder.window_size % 2 == 0 {
        let w = cfg.encoder.window_size;
        cfg.encoder.window_size = w + 1;
        log::info!("encoder.window_size {w} is even; using {}", w + 1);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, overrides, path)
}
