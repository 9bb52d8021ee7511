//! Shared fixtures for the benchmarks.

use tbt_core::model::Detector;
use tbt_core::synth;
use tbt_core::train::{targets_for, Example};
use tbt_core::{ParamStore, RunConfig};

/// Default detector, its parameters, and one synthetic training example.
pub fn fixture(cfg: &RunConfig) -> (Detector, ParamStore, Example) {
    let mut store = ParamStore::new(cfg.seed);
    let det = Detector::new(&mut store, cfg, cfg.synth.num_classes).expect("detector");
    let s = synth::generate(&cfg.synth, 0).expect("sample");
    let ex = Example {
        features: s.features,
        train_actions: s.jittered_actions,
        eval_actions: s.clean_actions,
    };
    targets_for(cfg, &ex).expect("targets");
    (det, store, ex)
}
