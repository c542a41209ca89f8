//! `keenkt` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input
//! validation error. Every command validates its inputs before writing
//! anything, and outputs land atomically.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use keenkt::data::{load_csv, load_csv_with_vocab, simulate, write_csv, DataError, SimulatorConfig};
use keenkt::gradcheck::run_gradcheck;
use keenkt::io::write_atomic;
use keenkt::train::{
    anomaly_sensitivity, cross_validate, evaluate, holdout_split, inspect, load_checkpoint, save_checkpoint,
    train_with_progress, CheckpointError, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Invalid(_) => 2,
        }
    }
}

fn invalid(e: impl Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Errors in the user's config or input data are validation errors; the
/// rest are runtime failures.
fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config { .. }
        | TrainError::EmptySplit(_)
        | TrainError::Vocabulary { .. }
        | TrainError::Data(_)
        | TrainError::NoAnomalies
        | TrainError::UnknownStudent(_)
        | TrainError::Unsupported(_) => invalid(e),
        _ => runtime(e),
    }
}

fn data_error(e: DataError) -> CliError {
    invalid(e)
}

fn checkpoint_error(e: CheckpointError) -> CliError {
    invalid(format!("cannot load checkpoint: {e}"))
}

/// File locations that may stand in for command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PathsConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    train: TrainConfig,
    simulator: SimulatorConfig,
    paths: PathsConfig,
}

fn load_config(path: Option<&Path>) -> Result<CliConfig, CliError> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateArg {
    Cl,
    Diff,
    Nig,
}

#[derive(Debug, Parser)]
#[command(name = "keenkt", version, about = "Knowledge tracing with NIG knowledge states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON config with `train`, `simulator` and `paths` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Interaction log in CSV form.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Components to switch off; may be repeated.
    #[arg(long, value_enum)]
    ablate: Vec<AblateArg>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic interaction log.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a CSV log, holding out students for early stopping.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Checkpoint manifest to write (its blob goes next to it as `.bin`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the training report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a checkpoint on a CSV log.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Student-level k-fold cross-validation.
    CrossValidate {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        folds: Option<usize>,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step dump of one student's NIG state and predictions.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        student: String,
        /// Number of leading steps; all by default.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variance and confidence around labeled slips and guesses.
    Anomaly {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences for every op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn require(flag: Option<PathBuf>, fallback: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or(fallback)
        .ok_or_else(|| invalid(format!("missing --{name} (or paths.{name} in the config)")))
}

/// Prints `value` as JSON and, when `out` is given, also writes it there.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(runtime)?;
    if let Some(path) = out {
        write_atomic(path, format!("{json}\n").as_bytes()).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    println!("{json}");
    Ok(())
}

fn train_config(cfg: &CliConfig, args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut train = cfg.train.clone();
    if let Some(seed) = args.common.seed {
        train.seed = seed;
    }
    for a in &args.ablate {
        match a {
            AblateArg::Cl => train.ablation.cl = true,
            AblateArg::Diff => train.ablation.diff = true,
            AblateArg::Nig => train.ablation.nig = true,
        }
    }
    train.validate().map_err(train_error)?;
    Ok(train)
}

fn cmd_simulate(common: Common, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(common.config.as_deref())?;
    let mut sim = cfg.simulator;
    if let Some(seed) = common.seed {
        sim.seed = seed;
    }
    sim.validate().map_err(data_error)?;
    let out = require(out, cfg.paths.out, "out")?;
    let dataset = simulate(&sim).map_err(data_error)?;
    write_csv(&dataset, &out).map_err(runtime)?;
    eprintln!(
        "wrote {} interactions for {} students to {}",
        dataset.n_interactions(),
        dataset.sequences.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, out: Option<PathBuf>, report: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(args.common.config.as_deref())?;
    let train_cfg = train_config(&cfg, &args)?;
    let data = require(args.data.clone(), cfg.paths.data.clone(), "data")?;
    let out = require(out, cfg.paths.checkpoint.clone().or(cfg.paths.out.clone()), "out")?;
    if out.extension().is_some_and(|e| e == "bin") {
        return Err(invalid(format!("checkpoint path must not end in .bin: {}", out.display())));
    }
    let dataset = load_csv(&data).map_err(data_error)?;
    let (train_seqs, val_seqs) =
        holdout_split(&dataset.sequences, train_cfg.val_fraction, train_cfg.seed).map_err(train_error)?;
    let (trained, train_report) = train_with_progress(&train_cfg, &dataset.vocab, &train_seqs, &val_seqs, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  bce {:.4}  val auc {}  val acc {:.4}",
            e.epoch,
            e.total,
            e.bce,
            e.val_auc.map_or("n/a".into(), |v| format!("{v:.4}")),
            e.val_acc
        )
    })
    .map_err(train_error)?;
    save_checkpoint(&trained, &out).map_err(runtime)?;
    emit(&train_report, report.as_deref())
}

fn cmd_evaluate(
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config.as_deref())?;
    let checkpoint = require(checkpoint, cfg.paths.checkpoint, "checkpoint")?;
    let data = require(data, cfg.paths.data, "data")?;
    let trained = load_checkpoint(&checkpoint).map_err(checkpoint_error)?;
    let dataset = load_csv_with_vocab(&data, &trained.vocab).map_err(data_error)?;
    let metrics = evaluate(&trained, &dataset.sequences).map_err(train_error)?;
    emit(&metrics, out.as_deref())
}

fn cmd_cross_validate(
    args: TrainArgs,
    folds: Option<usize>,
    workers: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(args.common.config.as_deref())?;
    let mut train_cfg = cfg.train.clone();
    if let Some(k) = folds {
        train_cfg.folds = k;
    }
    let train_cfg = train_config(
        &CliConfig {
            train: train_cfg,
            ..cfg.clone()
        },
        &args,
    )?;
    let data = require(args.data, cfg.paths.data, "data")?;
    let dataset = load_csv(&data).map_err(data_error)?;
    let report = cross_validate(&train_cfg, &dataset, workers).map_err(train_error)?;
    emit(&report, out.or(cfg.paths.out).as_deref())
}

fn load_pair(
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<(keenkt::train::TrainedModel, keenkt::data::Dataset, CliConfig), CliError> {
    let cfg = load_config(config.as_deref())?;
    let checkpoint = require(checkpoint, cfg.paths.checkpoint.clone(), "checkpoint")?;
    let data = require(data, cfg.paths.data.clone(), "data")?;
    let trained = load_checkpoint(&checkpoint).map_err(checkpoint_error)?;
    let dataset = load_csv_with_vocab(&data, &trained.vocab).map_err(data_error)?;
    Ok((trained, dataset, cfg))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, out } => cmd_simulate(common, out),
        Command::Train { args, out, report } => cmd_train(args, out, report),
        Command::Evaluate {
            checkpoint,
            data,
            config,
            out,
        } => cmd_evaluate(checkpoint, data, config, out),
        Command::CrossValidate {
            args,
            folds,
            workers,
            out,
        } => cmd_cross_validate(args, folds, workers, out),
        Command::Inspect {
            checkpoint,
            data,
            config,
            student,
            steps,
            out,
        } => {
            let (trained, dataset, _) = load_pair(checkpoint, data, config)?;
            let records = inspect(&trained, &dataset.sequences, &student, steps).map_err(train_error)?;
            emit(&records, out.as_deref())
        }
        Command::Anomaly {
            checkpoint,
            data,
            config,
            out,
        } => {
            let (trained, dataset, _) = load_pair(checkpoint, data, config)?;
            let report = anomaly_sensitivity(&trained, &dataset.sequences).map_err(train_error)?;
            emit(&report, out.as_deref())
        }
        Command::Gradcheck { seed, out } => {
            let report = run_gradcheck(seed).map_err(runtime)?;
            for row in &report.rows {
                eprintln!(
                    "{:<32} {:>6} coords  max rel err {:.3e}  {}",
                    row.name,
                    row.coordinates,
                    row.max_rel_error,
                    if row.passed { "pass" } else { "FAIL" }
                );
            }
            emit(&report, out.as_deref())?;
            if report.passed() {
                Ok(())
            } else {
                Err(runtime(format!("gradient check failed (tolerance {:e})", report.tolerance)))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
