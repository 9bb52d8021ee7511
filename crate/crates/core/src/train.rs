//! Train, evaluate, gradient-check and ablation drivers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::encoder::{pyramid_geometry, BackboneVariant};
use crate::gradcheck::{grad_check_all, GradCheckError, GradCheckOptions};
use crate::graph::Graph;
use crate::heads::{self, assign_targets, Action, HeadError, HeadKind, Targets};
use crate::io::{self, IoError};
use crate::model::{Detector, LossTerms, ModelError};
use crate::optim::{lr_at, AdamW};
use crate::params::{ParamError, ParamStore};
use crate::postproc::{self, Detection, EvalError, GroundTruth, MapReport};
use crate::synth::{self, SynthError};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_FILE: &str = "checkpoint.tbtw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("checkpoint does not match the configured model: {0}")]
    Checkpoint(ParamError),
    #[error("non-finite values at step {step}: {detail}; last good parameters saved to {checkpoint}")]
    NonFinite {
        step: usize,
        detail: String,
        checkpoint: PathBuf,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<HeadError> for RunError {
    fn from(e: HeadError) -> Self {
        RunError::Model(ModelError::Head(e))
    }
}

impl RunError {
    /// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Model(ModelError::Config(_) | ModelError::SequenceTooShort { .. } | ModelError::InputDim { .. }) => 2,
            RunError::Checkpoint(_) => 2,
            RunError::NonFinite { .. } => 3,
            RunError::Model(e) if e.is_numeric() => 3,
            RunError::GradCheck(_) => 3,
            _ => 1,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| RunError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct Example {
    pub features: Tensor,
    /// Supervision (jittered for synthetic training data).
    pub train_actions: Vec<Action>,
    /// Clean annotations used for evaluation.
    pub eval_actions: Vec<Action>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub num_classes: usize,
}

/// Synthetic benchmark, or the annotation file in `data.annotations`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, RunError> {
    match &cfg.data.annotations {
        None => {
            let s = synth::make_splits(&cfg.synth, cfg.synth.n_train, cfg.synth.n_val)?;
            let conv = |x: synth::SynthSample| Example {
                features: x.features,
                train_actions: x.jittered_actions,
                eval_actions: x.clean_actions,
            };
            Ok(Dataset {
                train: s.train.into_iter().map(conv).collect(),
                val: s.val.into_iter().map(conv).collect(),
                num_classes: cfg.synth.num_classes,
            })
        }
        Some(path) => {
            let set = io::read_annotations(path)?;
            let mut train = Vec::new();
            let mut val = Vec::new();
            for v in &set.videos {
                let features = io::read_features(&set.feature_path(path, v))?;
                let len = features.rows() as f64;
                let actions: Vec<Action> = set
                    .grid_actions(v)
                    .into_iter()
                    .map(|a| Action::new(a.start.min(len), a.end.min(len), a.class))
                    .filter(|a| a.end > a.start)
                    .collect();
                let ex = Example {
                    features,
                    train_actions: actions.clone(),
                    eval_actions: actions,
                };
                if v.subset == cfg.data.train_subset {
                    train.push(ex);
                } else if v.subset == cfg.data.val_subset {
                    val.push(ex);
                }
            }
            Ok(Dataset {
                train,
                val,
                num_classes: set.labels.len(),
            })
        }
    }
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Writes the synthetic benchmark as feature files plus an annotation set in
/// `dir`, one grid step per second. Training videos carry the (possibly
/// jittered) supervision labels, validation videos the clean ones.
pub fn export_synthetic(cfg: &RunConfig, dir: &Path) -> Result<PathBuf, RunError> {
    let s = synth::make_splits(&cfg.synth, cfg.synth.n_train, cfg.synth.n_val)?;
    fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let labels: Vec<String> = (0..cfg.synth.num_classes).map(|c| format!("class{c}")).collect();
    let mut videos = Vec::new();
    let subsets = [(&cfg.data.train_subset, &s.train, true), (&cfg.data.val_subset, &s.val, false)];
    for (subset, samples, jittered) in subsets {
        for x in samples {
            let id = format!("{subset}_{:04}", x.index);
            io::write_features(&dir.join(format!("{id}.tbtf")), &x.features)?;
            let actions = if jittered { &x.jittered_actions } else { &x.clean_actions };
            videos.push(io::VideoAnnotation {
                id,
                duration_seconds: x.features.rows() as f64,
                feature_stride_seconds: 1.0,
                subset: subset.clone(),
                features: None,
                actions: actions
                    .iter()
                    .map(|a| io::AnnotatedAction {
                        start: a.start,
                        end: a.end,
                        label: labels[a.class].clone(),
                    })
                    .collect(),
            });
        }
    }
    let path = dir.join(ANNOTATIONS_FILE);
    io::write_annotations(&path, &io::AnnotationSet { labels, videos })?;
    Ok(path)
}

pub fn targets_for(cfg: &RunConfig, ex: &Example) -> Result<Targets, RunError> {
    let geom = pyramid_geometry(ex.features.rows(), cfg.encoder.num_levels, cfg.encoder.downsample_stride);
    Ok(assign_targets(&ex.train_actions, &geom, ex.features.rows(), cfg.loss.bins)?)
}

/// Mean loss components for one optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: LossTerms,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,lr,total,cls,reg_start,reg_end,weighted_reg,num_positive,grad_norm";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e}",
            self.step, self.lr, l.total, l.cls, l.reg_start, l.reg_end, l.weighted_reg, l.num_positive, self.grad_norm
        )
    }
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

impl TrainOutcome {
    /// Mean total loss over the first and last `window` steps.
    pub fn loss_drop(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.metrics.len()).max(1);
        let mean = |s: &[StepMetrics]| s.iter().map(|m| m.loss.total).sum::<f64>() / s.len() as f64;
        (mean(&self.metrics[..w]), mean(&self.metrics[self.metrics.len() - w..]))
    }
}

/// Loss and dense per-parameter gradients for one example.
fn example_gradients(
    det: &Detector,
    store: &ParamStore,
    cfg: &RunConfig,
    ex: &Example,
    targets: &Targets,
) -> Result<(Vec<Vec<f64>>, LossTerms), ModelError> {
    let mut g = Graph::new(store);
    let out = det.forward(&mut g, &ex.features)?;
    let (loss, terms) = det.loss(&mut g, &out, targets, &cfg.loss)?;
    let grads = g.backward(loss)?;
    let mut dense = vec![Vec::new(); store.len()];
    for (id, gr) in grads.params() {
        dense[id.index()] = gr.to_vec();
    }
    Ok((dense, terms))
}

fn batch_for_step(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
    rng.set_stream(step as u64);
    let mut idx = sample(&mut rng, n, batch.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Full training run on a prepared dataset; writes the metrics log,
/// checkpoint and effective config into `output_dir`.
pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome, RunError> {
    if data.train.is_empty() {
        return Err(ConfigError::Invalid {
            field: "data".into(),
            msg: "no training examples".into(),
        }
        .into());
    }
    cfg.echo()?;
    let mut store = ParamStore::new(cfg.seed);
    let det = Detector::new(&mut store, cfg, data.num_classes)?;
    let targets: Vec<Targets> = data
        .train
        .iter()
        .map(|ex| targets_for(cfg, ex))
        .collect::<Result<_, _>>()?;
    let mut opt = AdamW::new(&store, &cfg.optimizer);
    let ckpt = cfg.output_dir.join(CHECKPOINT_FILE);
    let mut log = String::from(METRICS_HEADER);
    log.push('\n');
    let mut metrics = Vec::with_capacity(cfg.optimizer.steps);
    for step in 0..cfg.optimizer.steps {
        let batch = batch_for_step(cfg.seed, step, data.train.len(), cfg.optimizer.batch_size);
        let results: Vec<Result<(Vec<Vec<f64>>, LossTerms), ModelError>> = batch
            .par_iter()
            .map(|&i| example_gradients(&det, &store, cfg, &data.train[i], &targets[i]))
            .collect();
        let mut sum: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let mut mean = LossTerms::default();
        let scale = 1.0 / batch.len() as f64;
        for r in results {
            let (grads, terms) = match r {
                Ok(v) => v,
                Err(e) if e.is_numeric() => {
                    store.save(&ckpt).map_err(RunError::Checkpoint)?;
                    write_file(&cfg.output_dir.join(METRICS_FILE), &log)?;
                    return Err(RunError::NonFinite {
                        step,
                        detail: e.to_string(),
                        checkpoint: ckpt,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            for (acc, g) in sum.iter_mut().zip(&grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * scale;
                }
            }
            mean.total += terms.total * scale;
            mean.cls += terms.cls * scale;
            mean.reg_start += terms.reg_start * scale;
            mean.reg_end += terms.reg_end * scale;
            mean.weighted_reg += terms.weighted_reg * scale;
            mean.num_positive += terms.num_positive;
        }
        let lr = lr_at(&cfg.optimizer, step);
        let before = store.clone();
        let grad_norm = opt.step(&mut store, &mut sum, lr);
        if !grad_norm.is_finite() || store.iter().any(|(_, _, t)| !t.is_finite()) {
            before.save(&ckpt).map_err(RunError::Checkpoint)?;
            write_file(&cfg.output_dir.join(METRICS_FILE), &log)?;
            return Err(RunError::NonFinite {
                step,
                detail: "parameter update".into(),
                checkpoint: ckpt,
            });
        }
        let m = StepMetrics {
            step,
            lr,
            loss: mean,
            grad_norm,
        };
        log.push_str(&m.csv_row());
        log.push('\n');
        if step % 100 == 0 {
            log::info!("step {step} loss {:.5} cls {:.5} reg {:.5}", mean.total, mean.cls, mean.weighted_reg);
        }
        metrics.push(m);
    }
    store.save(&ckpt).map_err(RunError::Checkpoint)?;
    write_file(&cfg.output_dir.join(METRICS_FILE), &log)?;
    Ok(TrainOutcome {
        detector: det,
        store,
        metrics,
        checkpoint: ckpt,
    })
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome, RunError> {
    let data = load_dataset(cfg)?;
    train_on(cfg, &data)
}

fn ground_truth(actions: &[Action]) -> Vec<GroundTruth> {
    actions.iter().map(|a| GroundTruth::new(a.start, a.end, a.class)).collect()
}

/// Decode, NMS and mAP over `examples` with their clean annotations.
pub fn evaluate(
    cfg: &RunConfig,
    det: &Detector,
    store: &ParamStore,
    examples: &[Example],
) -> Result<MapReport, RunError> {
    let dets: Vec<Vec<Detection>> = examples
        .par_iter()
        .map(|ex| det.predict(store, &ex.features).map(|p| postproc::postprocess(&p, &cfg.eval)))
        .collect::<Result<_, _>>()?;
    let gts: Vec<Vec<GroundTruth>> = examples.iter().map(|ex| ground_truth(&ex.eval_actions)).collect();
    Ok(postproc::mean_ap(&dets, &gts, &cfg.eval.tiou_thresholds)?)
}

/// Loads `checkpoint`, evaluates on the validation split and writes
/// `results.csv` into `output_dir`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<MapReport, RunError> {
    let data = load_dataset(cfg)?;
    let mut store = ParamStore::new(cfg.seed);
    let det = Detector::new(&mut store, cfg, data.num_classes)?;
    store.load(checkpoint).map_err(|e| match e {
        ParamError::Io { .. } => RunError::Checkpoint(e),
        other => RunError::Checkpoint(other),
    })?;
    let report = evaluate(cfg, &det, &store, &data.val)?;
    write_file(&cfg.output_dir.join(RESULTS_FILE), &report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathResult {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub paths: Vec<PathResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(|p| p.max_rel_err <= GRADCHECK_TOLERANCE)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("path,max_rel_err  (seeds: {}, tolerance {GRADCHECK_TOLERANCE:e})\n", self.seeds);
        for p in &self.paths {
            let verdict = if p.max_rel_err <= GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
            writeln!(s, "{},{:.3e},{verdict}", p.name, p.max_rel_err).unwrap();
        }
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckRun {
    pub seeds: usize,
    pub coords_per_param: usize,
    /// Scales every analytic gradient; used as a negative control.
    pub fault: Option<f64>,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        Self {
            seeds: 20,
            coords_per_param: 2,
            fault: None,
        }
    }
}

/// Largest sequence / channel sizes a gradient check accepts.
pub const GRADCHECK_MAX_LEN: usize = 32;
pub const GRADCHECK_MAX_DIM: usize = 16;

impl RunConfig {
    /// Small model that exercises every code path in well under a second.
    pub fn gradcheck_preset() -> RunConfig {
        let mut c = RunConfig::default();
        c.encoder.input_dim = 6;
        c.encoder.embed_dim = 8;
        c.encoder.num_heads = 2;
        c.encoder.mlp_ratio = 2;
        c.encoder.window_size = 5;
        c.encoder.num_levels = 4;
        c.encoder.stem_blocks = 1;
        c.fpn.out_channels = 8;
        c.loss.bins = 6;
        c.ssm.state_dim = 3;
        c.synth.seq_len = 16;
        c.synth.feat_dim = 6;
        c.synth.num_classes = 3;
        c.synth.duration_range = (2, 8);
        c.synth.actions_per_seq = (1, 2);
        c
    }
}

fn tensor_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "model",
            detail: other.to_string(),
        },
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn check_detector(cfg: &RunConfig, seed: u64, run: &GradcheckRun) -> Result<f64, RunError> {
    let mut store = ParamStore::new(seed);
    let classes = cfg.synth.num_classes;
    let det = Detector::new(&mut store, cfg, classes)?;
    // move biases and norms off their initial values so every term is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).rank() == 1 {
            for v in store.get_mut(id).data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 0.1 * z;
            }
        }
    }
    let t = cfg.synth.seq_len;
    let features = random_tensor(&mut rng, &[t, cfg.encoder.input_dim], 1.0);
    let mut actions = Vec::new();
    let mut start = rng.random_range(0.0..2.0);
    while start + 2.0 < t as f64 {
        let len = rng.random_range(1.5..(t as f64 / 2.0));
        let end = (start + len).min(t as f64 - 0.5);
        actions.push(Action::new(start, end, rng.random_range(0..classes)));
        start = end + rng.random_range(1.0..4.0);
    }
    let ex = Example {
        features,
        train_actions: actions.clone(),
        eval_actions: actions,
    };
    let targets = targets_for(cfg, &ex)?;
    let opts = GradCheckOptions {
        coords_per_param: run.coords_per_param,
        seed,
        ..GradCheckOptions::default()
    };
    Ok(grad_check_all(&store, opts, |g| {
        if let Some(f) = run.fault {
            g.inject_gradient_fault(f);
        }
        let out = det.forward(g, &ex.features).map_err(tensor_err)?;
        let (loss, _) = det.loss(g, &out, &targets, &cfg.loss).map_err(tensor_err)?;
        Ok(loss)
    })?)
}

fn check_standalone(cfg: &RunConfig, seed: u64, run: &GradcheckRun, path: &str) -> Result<f64, RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let w = cfg.loss.bins;
    let mut store = ParamStore::new(seed);
    let opts = GradCheckOptions {
        coords_per_param: usize::MAX,
        seed,
        ..GradCheckOptions::default()
    };
    let fault = run.fault;
    let err = match path {
        "focal" => {
            let logits = store.insert("logits", random_tensor(&mut rng, &[6, 3], 2.0)).map_err(ModelError::from)?;
            let targets: Vec<f64> = (0..18).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let (a, gm) = (cfg.loss.focal_alpha, cfg.loss.focal_gamma);
            grad_check_all(&store, opts, |g| {
                if let Some(f) = fault {
                    g.inject_gradient_fault(f);
                }
                let z = g.param(logits);
                let l = g.sigmoid_focal(z, targets.clone(), a, gm)?;
                g.sum(l)
            })?
        }
        "dfl" => {
            let logits = store.insert("logits", random_tensor(&mut rng, &[5, w], 1.5)).map_err(ModelError::from)?;
            let targets: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..=(w - 1) as f64)).collect();
            grad_check_all(&store, opts, |g| {
                if let Some(f) = fault {
                    g.inject_gradient_fault(f);
                }
                let z = g.param(logits);
                heads::dfl_loss_graph(g, z, &targets).map_err(tensor_err)
            })?
        }
        "expectation" => {
            let logits = store.insert("logits", random_tensor(&mut rng, &[4, w], 1.5)).map_err(ModelError::from)?;
            let weights = random_tensor(&mut rng, &[4, 1], 1.0);
            grad_check_all(&store, opts, |g| {
                if let Some(f) = fault {
                    g.inject_gradient_fault(f);
                }
                let z = g.param(logits);
                let p = g.softmax(z)?;
                let e = heads::expectation(g, p).map_err(tensor_err)?;
                let c = g.constant(weights.clone());
                let m = g.mul(e, c)?;
                g.sum(m)
            })?
        }
        other => unreachable!("unknown standalone path {other}"),
    };
    Ok(err)
}

/// Gradient check over the focal, DFL and expectation terms, the total loss
/// for every backbone variant and the scalar-offset head.
pub fn run_gradcheck(cfg: &RunConfig, run: &GradcheckRun) -> Result<GradcheckReport, RunError> {
    let len = cfg.synth.seq_len;
    if len > GRADCHECK_MAX_LEN || cfg.encoder.embed_dim > GRADCHECK_MAX_DIM || cfg.encoder.input_dim > GRADCHECK_MAX_DIM {
        return Err(ConfigError::Invalid {
            field: "synth.seq_len".into(),
            msg: format!(
                "gradient checks need seq_len <= {GRADCHECK_MAX_LEN} and dims <= {GRADCHECK_MAX_DIM} \
                 (got seq_len {len}, embed_dim {})",
                cfg.encoder.embed_dim
            ),
        }
        .into());
    }
    let mut paths: Vec<PathResult> = Vec::new();
    let mut record = |name: String, errs: Vec<f64>| {
        paths.push(PathResult {
            name,
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
    };
    let seeds: Vec<u64> = (0..run.seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect();
    for path in ["focal", "dfl", "expectation"] {
        let errs = seeds
            .par_iter()
            .map(|&s| check_standalone(cfg, s, run, path))
            .collect::<Result<Vec<_>, _>>()?;
        record(path.to_string(), errs);
    }
    for variant in BackboneVariant::ALL {
        let mut c = cfg.clone();
        c.backbone_variant = variant;
        c.head = HeadKind::Bdr;
        let errs = seeds
            .par_iter()
            .map(|&s| check_detector(&c, s, run))
            .collect::<Result<Vec<_>, _>>()?;
        record(format!("total/{}", variant.name()), errs);
    }
    let mut c = cfg.clone();
    c.backbone_variant = BackboneVariant::Transformer;
    c.head = HeadKind::Baseline;
    let errs = seeds
        .par_iter()
        .map(|&s| check_detector(&c, s, run))
        .collect::<Result<Vec<_>, _>>()?;
    record("total/baseline_head".into(), errs);
    Ok(GradcheckReport {
        seeds: run.seeds,
        paths,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Window,
    Levels,
    Lambda,
    Backbone,
    Head,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Window => "window",
            AblationAxis::Levels => "levels",
            AblationAxis::Lambda => "lambda",
            AblationAxis::Backbone => "backbone",
            AblationAxis::Head => "head",
        }
    }

    /// Setting labels swept along this axis.
    pub fn settings(self) -> Vec<String> {
        match self {
            AblationAxis::Window => [19, 25, 31, 37].iter().map(|w| w.to_string()).collect(),
            AblationAxis::Levels => (1..=7).map(|l: usize| l.to_string()).collect(),
            AblationAxis::Lambda => ["0.2", "0.5", "1.0", "2.0", "5.0"].iter().map(|s| s.to_string()).collect(),
            AblationAxis::Backbone => BackboneVariant::ALL.iter().map(|b| b.name().to_string()).collect(),
            AblationAxis::Head => [HeadKind::Bdr, HeadKind::Baseline].iter().map(|h| h.name().to_string()).collect(),
        }
    }

    /// `cfg` with this axis set to `setting`.
    pub fn apply(self, cfg: &RunConfig, setting: &str) -> Result<RunConfig, ConfigError> {
        let key = match self {
            AblationAxis::Window => "encoder.window_size",
            AblationAxis::Levels => "encoder.num_levels",
            AblationAxis::Lambda => "loss.lambda_reg",
            AblationAxis::Backbone => "backbone_variant",
            AblationAxis::Head => "head",
        };
        let mut overrides = vec![format!("{key}={setting}")];
        let out = cfg.output_dir.join(format!("{}_{setting}", self.name()));
        overrides.push(format!("output_dir=\"{}\"", out.display()));
        crate::config::parse_config_str(&cfg.to_toml(), &overrides, Path::new("<ablation>"))
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "window" => Ok(AblationAxis::Window),
            "levels" => Ok(AblationAxis::Levels),
            "lambda" => Ok(AblationAxis::Lambda),
            "backbone" => Ok(AblationAxis::Backbone),
            "head" => Ok(AblationAxis::Head),
            other => Err(format!("unknown axis `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub average_map: f64,
    pub map_at_05: Option<f64>,
}

pub const ABLATION_HEADER: &str = "axis,setting,average_map,map_at_0.5";

pub fn ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let m = r.map_at_05.map(|v| format!("{v:.4}")).unwrap_or_else(|| "nan".into());
        writeln!(s, "{},{},{:.4},{m}", axis.name(), r.setting, r.average_map).unwrap();
    }
    s
}

/// Retrains once per setting and reports validation mAP; the table is also
/// written to `output_dir/ablation_<axis>.csv`.
pub fn run_ablation(cfg: &RunConfig, axis: AblationAxis) -> Result<Vec<AblationRow>, RunError> {
    let data = load_dataset(cfg)?;
    let mut rows = Vec::new();
    for setting in axis.settings() {
        let c = axis.apply(cfg, &setting)?;
        let out = train_on(&c, &data)?;
        let report = evaluate(&c, &out.detector, &out.store, &data.val)?;
        log::info!("{} = {setting}: average mAP {:.4}", axis.name(), report.average);
        rows.push(AblationRow {
            setting,
            average_map: report.average,
            map_at_05: report.map_at(0.5),
        });
    }
    write_file(
        &cfg.output_dir.join(format!("ablation_{}.csv", axis.name())),
        &ablation_table(axis, &rows),
    )?;
    Ok(rows)
}
