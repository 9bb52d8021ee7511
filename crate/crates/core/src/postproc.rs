//! Decoding, non-maximum suppression and the tIoU / AP / mAP protocol.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::sigmoid;
use crate::model::Predictions;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(start: f64, end: f64, class_id: usize, score: f64) -> Self {
        Self {
            start,
            end,
            class_id,
            score,
        }
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn new(start: f64, end: f64, class_id: usize) -> Self {
        Self { start, end, class_id }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth set is empty")]
    EmptyGroundTruth,
    #[error("{videos_det} detection lists for {videos_gt} videos")]
    VideoCount { videos_det: usize, videos_gt: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    pub score_floor: f64,
    pub nms_threshold: f64,
    pub max_detections_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou_thresholds: TiouGrid::Thumos.thresholds(),
            score_floor: 0.01,
            nms_threshold: 0.5,
            max_detections_per_video: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let t = &self.tiou_thresholds;
        if t.is_empty() || t.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(("tiou_thresholds".into(), "need at least one threshold in (0, 1)".into()));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(("tiou_thresholds".into(), "must be strictly increasing".into()));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(("score_floor".into(), format!("must lie in [0, 1), got {}", self.score_floor)));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(("nms_threshold".into(), format!("must lie in [0, 1], got {}", self.nms_threshold)));
        }
        if self.max_detections_per_video == 0 {
            return Err(("max_detections_per_video".into(), "must be at least 1".into()));
        }
        Ok(())
    }
}

/// Standard threshold grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiouGrid {
    /// `0.3:0.1:0.7`
    Thumos,
    /// `0.5:0.05:0.95`
    Activitynet,
    /// `0.1:0.1:0.5`
    Epic,
}

impl TiouGrid {
    pub fn thresholds(self) -> Vec<f64> {
        let (lo, step, n) = match self {
            TiouGrid::Thumos => (3, 1, 5),
            TiouGrid::Activitynet => (10, 1, 10),
            TiouGrid::Epic => (1, 1, 5),
        };
        let denom = if self == TiouGrid::Activitynet { 20.0 } else { 10.0 };
        (0..n).map(|i| (lo + i * step) as f64 / denom).collect()
    }
}

impl std::str::FromStr for TiouGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "thumos" => Ok(TiouGrid::Thumos),
            "activitynet" => Ok(TiouGrid::Activitynet),
            "epic" => Ok(TiouGrid::Epic),
            other => Err(format!("unknown tiou grid `{other}` (expected thumos, activitynet or epic)")),
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Score descending, then start and end ascending.
pub fn priority(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
}

/// Greedy per-class hard NMS. Output is in priority order.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(priority);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && tiou(k.interval(), d.interval()) > threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeStats {
    pub candidates: usize,
    pub degenerate: usize,
}

/// Location `j` of level `l` becomes `[(j - d̂s) s_l, (j + d̂e) s_l]`, clamped
/// to `[0, T]`, once per class whose probability clears the floor.
pub fn decode(pred: &Predictions, score_floor: f64) -> (Vec<Detection>, DecodeStats) {
    let mut out = Vec::new();
    let mut stats = DecodeStats::default();
    let c = pred.num_classes;
    let t = pred.seq_len as f64;
    let mut idx = 0;
    for &(len, stride) in &pred.geometry {
        let s = stride as f64;
        for j in 0..len {
            let start = ((j as f64 - pred.d_start[idx]) * s).clamp(0.0, t);
            let end = ((j as f64 + pred.d_end[idx]) * s).clamp(0.0, t);
            for k in 0..c {
                let p = sigmoid(pred.cls_logits[idx * c + k]);
                if p <= score_floor {
                    continue;
                }
                stats.candidates += 1;
                if start >= end {
                    stats.degenerate += 1;
                    continue;
                }
                out.push(Detection::new(start, end, k, p));
            }
            idx += 1;
        }
    }
    (out, stats)
}

/// Decode, NMS and top-k truncation for one video.
pub fn postprocess(pred: &Predictions, cfg: &EvalConfig) -> Vec<Detection> {
    let (dets, _) = decode(pred, cfg.score_floor);
    let mut kept = nms(&dets, cfg.nms_threshold);
    kept.truncate(cfg.max_detections_per_video);
    kept
}

/// Single-class AP over many videos. `dets` and `gts` pair a video index with
/// each interval; detections are ranked by score (ties by video, then start).
/// Each detection claims the unmatched ground truth of its video with the
/// highest tIoU at or above `threshold`. All-point interpolation.
pub fn average_precision(dets: &[(usize, Detection)], gts: &[(usize, GroundTruth)], threshold: f64) -> f64 {
    if gts.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, da) = &dets[a];
        let (vb, db) = &dets[b];
        db.score
            .total_cmp(&da.score)
            .then(va.cmp(vb))
            .then(priority(da, db))
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &i in &order {
        let (video, d) = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gv, g)) in gts.iter().enumerate() {
            if gv != video || matched[gi] {
                continue;
            }
            let o = tiou(d.interval(), (g.start, g.end));
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
        }
        tp.push(best.is_some());
    }
    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0.0;
    for (k, is_tp) in tp.iter().enumerate() {
        if *is_tp {
            hits += 1.0;
        }
        precision.push(hits / (k + 1) as f64);
        recall.push(hits / n_gt);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..recall.len() {
        ap += (recall[k] - prev) * precision[k];
        prev = recall[k];
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground truth, ascending.
    pub classes: Vec<usize>,
    /// `ap[t][c]` aligned with `thresholds` and `classes`.
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
    pub average: f64,
}

impl MapReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    /// `tiou,class,ap` rows, then one `mAP` row per threshold and the
    /// `average` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tiou,class,ap\n");
        for (ti, t) in self.thresholds.iter().enumerate() {
            for (ci, c) in self.classes.iter().enumerate() {
                writeln!(s, "{t:.4},{c},{:.4}", self.ap[ti][ci]).unwrap();
            }
        }
        for (ti, t) in self.thresholds.iter().enumerate() {
            writeln!(s, "{t:.4},mAP,{:.4}", self.map[ti]).unwrap();
        }
        writeln!(s, "average,mAP,{:.4}", self.average).unwrap();
        s
    }
}

/// Per-threshold mAP over classes present in the ground truth, and the
/// mean over thresholds. Both slices are indexed by video.
pub fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], thresholds: &[f64]) -> Result<MapReport, EvalError> {
    if dets.len() != gts.len() {
        return Err(EvalError::VideoCount {
            videos_det: dets.len(),
            videos_gt: gts.len(),
        });
    }
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let mut ap = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let row: Vec<f64> = classes
            .iter()
            .map(|&c| {
                let d: Vec<(usize, Detection)> = dets
                    .iter()
                    .enumerate()
                    .flat_map(|(v, ds)| ds.iter().filter(|x| x.class_id == c).map(move |x| (v, *x)))
                    .collect();
                let g: Vec<(usize, GroundTruth)> = gts
                    .iter()
                    .enumerate()
                    .flat_map(|(v, gs)| gs.iter().filter(|x| x.class_id == c).map(move |x| (v, *x)))
                    .collect();
                average_precision(&d, &g, t)
            })
            .collect();
        ap.push(row);
    }
    let map: Vec<f64> = ap.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let average = map.iter().sum::<f64>() / map.len() as f64;
    Ok(MapReport {
        thresholds: thresholds.to_vec(),
        classes,
        ap,
        map,
        average,
    })
}
