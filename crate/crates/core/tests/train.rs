use std::fs;
use std::path::Path;

use tbt_core::config::parse_config_str;
use tbt_core::train::*;
use tbt_core::RunConfig;

fn tiny(dir: &Path, extra: &[&str]) -> RunConfig {
    let mut overrides = vec![
        "optimizer.steps=12".to_string(),
        "optimizer.batch_size=2".to_string(),
        "synth.n_train=6".to_string(),
        "synth.n_val=3".to_string(),
        format!("output_dir=\"{}\"", dir.display()),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    parse_config_str(&RunConfig::gradcheck_preset().to_toml(), &overrides, Path::new("<test>")).unwrap()
}

#[test]
fn identical_config_and_seed_give_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_train(&tiny(a.path(), &[])).unwrap();
    run_train(&tiny(b.path(), &[])).unwrap();
    for f in [METRICS_FILE, CHECKPOINT_FILE] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    run_train(&tiny(c.path(), &["seed=5"])).unwrap();
    assert_ne!(
        fs::read(a.path().join(CHECKPOINT_FILE)).unwrap(),
        fs::read(c.path().join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn metrics_log_has_a_row_per_step() {
    let d = tempfile::tempdir().unwrap();
    let out = run_train(&tiny(d.path(), &[])).unwrap();
    let text = fs::read_to_string(d.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 13);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[0], i as f64);
        assert_eq!(fields[2], out.metrics[i].loss.total);
    }
    assert!(d.path().join(tbt_core::config::ECHO_FILE).exists());
}

#[test]
fn zero_lambda_logs_zero_weighted_regression() {
    let d = tempfile::tempdir().unwrap();
    let out = run_train(&tiny(d.path(), &["loss.lambda_reg=0.0"])).unwrap();
    assert!(out.metrics.iter().any(|m| m.loss.reg_start > 0.0));
    for m in &out.metrics {
        assert_eq!(m.loss.weighted_reg, 0.0);
        assert!((m.loss.total - m.loss.cls).abs() <= 1e-12 * m.loss.total.abs());
    }
}

#[test]
fn tiny_run_reduces_loss() {
    let d = tempfile::tempdir().unwrap();
    let out = run_train(&tiny(d.path(), &["optimizer.steps=150", "optimizer.learning_rate=0.005"])).unwrap();
    let (first, last) = out.loss_drop(10);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &[]);
    let out = run_train(&cfg).unwrap();
    let data = load_dataset(&cfg).unwrap();
    let direct = evaluate(&cfg, &out.detector, &out.store, &data.val).unwrap();
    let reloaded = run_eval(&cfg, &out.checkpoint).unwrap();
    assert_eq!(direct, reloaded);
    let csv = fs::read_to_string(d.path().join(RESULTS_FILE)).unwrap();
    assert_eq!(csv, direct.to_csv());
    assert_eq!(reloaded.thresholds, vec![0.3, 0.4, 0.5, 0.6, 0.7]);
}

#[test]
fn checkpoint_shape_mismatch_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = run_train(&tiny(d.path(), &[])).unwrap();
    let other = tiny(d.path(), &["fpn.out_channels=4"]);
    let err = run_eval(&other, &out.checkpoint).unwrap_err();
    assert!(matches!(err, RunError::Checkpoint(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    let missing = run_eval(&other, &d.path().join("nope.tbtw")).unwrap_err();
    assert!(missing.to_string().contains("nope.tbtw"), "{missing}");
}

#[test]
fn divergence_stops_with_last_good_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &["optimizer.learning_rate=1e305", "optimizer.grad_clip=0.0", "optimizer.warmup_steps=0"]);
    let err = run_train(&cfg).err().expect("training must diverge");
    assert_eq!(err.exit_code(), 3, "{err}");
    let RunError::NonFinite { checkpoint, .. } = err else { panic!("{err}") };
    let mut store = tbt_core::ParamStore::new(0);
    tbt_core::model::Detector::new(&mut store, &cfg, cfg.synth.num_classes).unwrap();
    store.load(&checkpoint).unwrap();
    assert!(store.iter().all(|(_, _, t)| t.is_finite()));
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_gradient() {
    let cfg = RunConfig::gradcheck_preset();
    let run = GradcheckRun {
        seeds: 2,
        ..GradcheckRun::default()
    };
    let report = run_gradcheck(&cfg, &run).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    let names: Vec<&str> = report.paths.iter().map(|p| p.name.as_str()).collect();
    for want in ["focal", "dfl", "expectation", "total/transformer", "total/hybrid_mamba", "total/sgp", "total/baseline_head"] {
        assert!(names.contains(&want), "{names:?}");
    }
    let bad = run_gradcheck(
        &cfg,
        &GradcheckRun {
            fault: Some(1.5),
            ..run
        },
    )
    .unwrap();
    assert!(!bad.passed());
    assert!(bad.paths.iter().all(|p| p.max_rel_err > 0.1), "{}", bad.to_text());
    assert!(bad.to_text().contains("FAIL"));
}

#[test]
fn gradcheck_rejects_large_configs() {
    let err = run_gradcheck(&RunConfig::default(), &GradcheckRun::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn ablation_axes_sweep_the_listed_settings() {
    let lists: [(&str, Vec<&str>); 5] = [
        ("window", vec!["19", "25", "31", "37"]),
        ("levels", vec!["1", "2", "3", "4", "5", "6", "7"]),
        ("lambda", vec!["0.2", "0.5", "1.0", "2.0", "5.0"]),
        ("backbone", vec!["transformer", "hybrid_mamba", "sgp"]),
        ("head", vec!["bdr", "baseline"]),
    ];
    let base = RunConfig::default();
    for (name, want) in lists {
        let axis: AblationAxis = name.parse().unwrap();
        assert_eq!(axis.name(), name);
        assert_eq!(axis.settings(), want);
        for s in axis.settings() {
            let c = axis.apply(&base, &s).unwrap();
            let got = match name {
                "window" => c.encoder.window_size.to_string(),
                "levels" => c.encoder.num_levels.to_string(),
                "lambda" => format!("{:.1}", c.loss.lambda_reg),
                "backbone" => c.backbone_variant.name().to_string(),
                _ => c.head.name().to_string(),
            };
            assert_eq!(got, s);
            assert_ne!(c.output_dir, base.output_dir);
        }
    }
    assert!("depth".parse::<AblationAxis>().is_err());
}

#[test]
fn ablation_table_parses_back() {
    let rows = vec![
        AblationRow {
            setting: "19".into(),
            average_map: 0.51234,
            map_at_05: Some(0.6),
        },
        AblationRow {
            setting: "25".into(),
            average_map: 0.25,
            map_at_05: None,
        },
    ];
    let t = ablation_table(AblationAxis::Window, &rows);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    assert_eq!(lines.len(), 3);
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(f, vec!["window", "19", "0.5123", "0.6000"]);
    assert!(lines[2].split(',').nth(3).unwrap().parse::<f64>().unwrap().is_nan());
}

#[test]
fn tiny_ablation_writes_one_row_per_setting() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &["optimizer.steps=2"]);
    let rows = run_ablation(&cfg, AblationAxis::Head).unwrap();
    assert_eq!(rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(), vec!["bdr", "baseline"]);
    let table = fs::read_to_string(d.path().join("ablation_head.csv")).unwrap();
    assert_eq!(table, ablation_table(AblationAxis::Head, &rows));
}

#[test]
fn exported_synthetic_data_loads_back() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &["synth.boundary_fuzz=0.0"]);
    let path = export_synthetic(&cfg, &d.path().join("data")).unwrap();
    let mut from_files = cfg.clone();
    from_files.data.annotations = Some(path);
    let a = load_dataset(&cfg).unwrap();
    let b = load_dataset(&from_files).unwrap();
    assert_eq!((b.train.len(), b.val.len(), b.num_classes), (6, 3, 3));
    for (x, y) in a.train.iter().chain(&a.val).zip(b.train.iter().chain(&b.val)) {
        assert_eq!(x.eval_actions, y.eval_actions);
        assert_eq!(x.features.shape(), y.features.shape());
        for (u, v) in x.features.data().iter().zip(y.features.data()) {
            assert_eq!(*u as f32 as f64, *v);
        }
    }
}
