//! Feature and annotation files.
//!
//! Features: `b"TBTF"`, then little-endian `u32` version, `T`, `D`, then
//! `T * D` little-endian `f32` values, row-major.
//!
//! Annotations: JSON of the shape
//!
//! ```json
//! {"labels": ["jump"], "videos": [{"id": "v0", "duration_seconds": 10.0,
//!   "feature_stride_seconds": 0.5, "subset": "train",
//!   "actions": [{"start": 2.0, "end": 6.0, "label": "jump"}]}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::Action;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"TBTF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {msg}")]
    Schema { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_features(features: &Tensor) -> Vec<u8> {
    let (t, d) = (features.rows(), features.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor, IoError> {
    let bad = |msg: String| IoError::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("bad magic, expected TBTF".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(bad(format!("empty feature matrix {t}x{d}")));
    }
    let payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad(format!("{t}x{d} overflows")))?;
    if bytes.len() - HEADER_LEN != payload {
        return Err(bad(format!(
            "payload has {} bytes, expected {payload}",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new([t, d], data).expect("shape"))
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<(), IoError> {
    fs::write(path, encode_features(features)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Tensor, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedAction {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoAnnotation {
    pub id: String,
    pub duration_seconds: f64,
    pub feature_stride_seconds: f64,
    #[serde(default = "default_subset")]
    pub subset: String,
    /// Feature file relative to the annotation file; `<id>.tbtf` if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub actions: Vec<AnnotatedAction>,
}

fn default_subset() -> String {
    "train".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub labels: Vec<String>,
    pub videos: Vec<VideoAnnotation>,
}

impl AnnotationSet {
    pub fn validate(&self, path: &Path) -> Result<(), IoError> {
        let bad = |msg: String| {
            Err(IoError::Schema {
                path: path.to_path_buf(),
                msg,
            })
        };
        for v in &self.videos {
            if !(v.feature_stride_seconds > 0.0) || !(v.duration_seconds > 0.0) {
                return bad(format!("video {}: duration and feature stride must be positive", v.id));
            }
            for a in &v.actions {
                if !self.labels.contains(&a.label) {
                    return bad(format!("video {}: label `{}` is not in the vocabulary", v.id, a.label));
                }
                if !(a.start >= 0.0 && a.start < a.end && a.end <= v.duration_seconds) {
                    return bad(format!(
                        "video {}: action [{}, {}] must satisfy 0 <= start < end <= {}",
                        v.id, a.start, a.end, v.duration_seconds
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn class_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Actions on the feature grid: start rounded down, end rounded up.
    pub fn grid_actions(&self, video: &VideoAnnotation) -> Vec<Action> {
        video
            .actions
            .iter()
            .map(|a| {
                Action::new(
                    seconds_to_grid_floor(a.start, video.feature_stride_seconds),
                    seconds_to_grid_ceil(a.end, video.feature_stride_seconds),
                    self.class_of(&a.label).expect("validated label"),
                )
            })
            .collect()
    }

    pub fn feature_path(&self, annotation_path: &Path, video: &VideoAnnotation) -> PathBuf {
        let dir = annotation_path.parent().unwrap_or(Path::new("."));
        match &video.features {
            Some(f) => dir.join(f),
            None => dir.join(format!("{}.tbtf", video.id)),
        }
    }
}

// a tiny tolerance keeps exact multiples like 6.0 / 0.5 from rounding past 12
const GRID_EPS: f64 = 1e-9;

pub fn seconds_to_grid_floor(t: f64, stride: f64) -> f64 {
    (t / stride + GRID_EPS).floor()
}

pub fn seconds_to_grid_ceil(t: f64, stride: f64) -> f64 {
    (t / stride - GRID_EPS).ceil()
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<AnnotationSet, IoError> {
    let set: AnnotationSet = serde_json::from_str(text).map_err(|e| IoError::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    set.validate(path)?;
    Ok(set)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_annotations(&text, path)
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(set).expect("serialisable");
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_roundtrip_at_f32() {
        let data: Vec<f64> = (0..21).map(|i| (i as f64 * 0.37).sin() * 3.1).collect();
        let t = Tensor::new([7, 3], data.clone()).unwrap();
        let back = decode_features(&encode_features(&t), Path::new("x")).unwrap();
        assert_eq!(back.shape(), &[7, 3]);
        for (a, b) in back.data().iter().zip(&data) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn feature_golden_bytes() {
        let t = Tensor::new([1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_features(&t);
        assert_eq!(
            bytes,
            [
                b'T', b'B', b'T', b'F', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00,
                0xc0
            ]
        );
    }

    #[test]
    fn feature_format_errors() {
        let t = Tensor::new([2, 2], vec![0.0; 4]).unwrap();
        let mut b = encode_features(&t);
        b[0] = b'X';
        assert!(matches!(decode_features(&b, Path::new("x")), Err(IoError::Format { .. })));
        let b = encode_features(&t);
        assert!(decode_features(&b[..b.len() - 1], Path::new("x")).is_err());
        let mut zero = b[..HEADER_LEN].to_vec();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(decode_features(&zero, Path::new("x")).is_err());
        let mut huge = b[..HEADER_LEN].to_vec();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_features(&huge, Path::new("x")).is_err());
    }

    fn doc(actions: &str) -> String {
        format!(
            r#"{{"labels": ["jump", "run"], "videos": [{{"id": "v0", "duration_seconds": 10.0,
            "feature_stride_seconds": 0.5, "actions": [{actions}]}}]}}"#
        )
    }

    #[test]
    fn annotation_grid_conversion() {
        let set = parse_annotations(&doc(r#"{"start": 2.0, "end": 6.0, "label": "run"}"#), Path::new("a.json")).unwrap();
        let acts = set.grid_actions(&set.videos[0]);
        assert_eq!(acts, vec![Action::new(4.0, 12.0, 1)]);
        let set = parse_annotations(&doc(r#"{"start": 2.2, "end": 5.9, "label": "run"}"#), Path::new("a.json")).unwrap();
        assert_eq!(set.grid_actions(&set.videos[0]), vec![Action::new(4.0, 12.0, 1)]);
    }

    #[test]
    fn annotation_errors() {
        let p = Path::new("a.json");
        assert!(parse_annotations(&doc(r#"{"start": 3.0, "end": 3.0, "label": "run"}"#), p).is_err());
        let err = parse_annotations(&doc(r#"{"start": 1.0, "end": 3.0, "label": "swim"}"#), p).unwrap_err();
        assert!(err.to_string().contains("swim"));
        assert!(parse_annotations(&doc(r#"{"start": 1.0, "end": 30.0, "label": "run"}"#), p).is_err());
        assert!(parse_annotations(r#"{"labels": []}"#, p).is_err());
    }
}
