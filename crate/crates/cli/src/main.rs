use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tbt_core::config::{self, ConfigError};
use tbt_core::encoder::BackboneVariant;
use tbt_core::postproc::TiouGrid;
use tbt_core::train::{self, AblationAxis, GradcheckRun, RunError};
use tbt_core::RunConfig;

/// Exit status when a run completes but misses its pass criterion.
const ACCEPTANCE_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "tbt", version, about = "Temporal action localization with boundary distribution regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set encoder.num_heads=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set backbone_variant=...`.
    #[arg(long)]
    backbone: Option<BackboneVariant>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and write checkpoint, metrics and the effective config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// tIoU threshold grid: thumos, activitynet or epic.
        #[arg(long)]
        grid: Option<TiouGrid>,
        /// Exit with status 4 when the average mAP falls below this.
        #[arg(long)]
        min_map: Option<f64>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 2)]
        coords: usize,
        /// Scale every analytic gradient by this factor.
        #[arg(long, hide = true)]
        inject_gradient_fault: Option<f64>,
    },
    /// Retrain along one axis and tabulate validation mAP.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Write the synthetic benchmark as feature files and annotations.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig, ConfigError> {
    let backbone = args.backbone.map(|b| format!("backbone_variant=\"{}\"", b.name()));
    let overrides: Vec<&String> = backbone.iter().chain(&args.overrides).chain(extra).collect();
    let mut cfg = match &args.config {
        Some(p) => config::parse_config(p, &overrides)?,
        None => config::parse_config_str("", &overrides, Path::new("<defaults>"))?,
    };
    cfg.apply_env_seed()?;
    Ok(cfg)
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Train { cfg } => {
            let cfg = load(&cfg, &[])?;
            let out = train::run_train(&cfg)?;
            let (first, last) = out.loss_drop(20);
            println!("trained {} steps, loss {first:.4} -> {last:.4}", out.metrics.len());
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Eval {
            cfg,
            checkpoint,
            grid,
            min_map,
        } => {
            let extra: Vec<String> = grid
                .map(|g| format!("eval.tiou_thresholds={:?}", g.thresholds()))
                .into_iter()
                .collect();
            let cfg = load(&cfg, &extra)?;
            let report = train::run_eval(&cfg, &checkpoint)?;
            for (t, m) in report.thresholds.iter().zip(&report.map) {
                println!("mAP@{t:.2} {m:.4}");
            }
            println!("average mAP {:.4}", report.average);
            if let Some(min) = min_map {
                if !(report.average >= min) {
                    eprintln!("average mAP {:.4} is below {min}", report.average);
                    return Ok(ExitCode::from(ACCEPTANCE_FAILURE));
                }
            }
        }
        Command::Gradcheck {
            cfg,
            seeds,
            coords,
            inject_gradient_fault,
        } => {
            let cfg = load(&cfg, &[])?;
            let run = GradcheckRun {
                seeds,
                coords_per_param: coords,
                fault: inject_gradient_fault,
            };
            let report = train::run_gradcheck(&cfg, &run)?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Ok(ExitCode::from(ACCEPTANCE_FAILURE));
            }
        }
        Command::Ablate { cfg, axis } => {
            let cfg = load(&cfg, &[])?;
            let rows = train::run_ablation(&cfg, axis)?;
            print!("{}", train::ablation_table(axis, &rows));
        }
        Command::Synth { cfg, out } => {
            let cfg = load(&cfg, &[])?;
            let path = train::export_synthetic(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    run(cli).unwrap_or_else(fail)
}
