//! Experiment runner CLI: generate synthetic trips, train the federated
//! ensemble, evaluate checkpoints, and verify gradients.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or numerical
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmode::config::{load_config, seed_override_from_env, ConfigError, ExperimentConfig};
use fedmode::nn::{grad_check, gradcheck_specs, GRADCHECK_SEEDS, PASS_THRESHOLD};
use fedmode::pipeline::{run_evaluate, run_experiment, run_generate, PipelineError};

#[derive(Parser)]
#[command(name = "fedmode", version, about = "Federated travel-mode inference at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the config's synthetic labeled trips to <out>/trips.csv.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the federated training experiment end to end.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a run's checkpoints against a labeled trips CSV.
    Evaluate {
        /// Directory holding config.echo.json, preprocess.json and *.ckpt.
        #[arg(long)]
        checkpoint_dir: PathBuf,
        /// Trips CSV with columns trip_id,lat,lon,timestamp,mode.
        #[arg(long)]
        data: PathBuf,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck,
}

/// Failures carrying their CLI exit code.
enum AppError {
    Config(String),
    Runtime(String),
}

impl AppError {
    fn exit_code(&self) -> ExitCode {
        match self {
            AppError::Config(_) => ExitCode::from(1),
            AppError::Runtime(_) => ExitCode::from(2),
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<PipelineError> for AppError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(inner) => AppError::Config(inner.to_string()),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<ExitCode, AppError> {
    match command {
        Command::Generate { config, out } => {
            let (config, out) = resolve(config, out)?;
            let path = run_generate(&config, &out)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, out } => {
            let (config, out) = resolve(config, out)?;
            let outcome = run_experiment(&config, &out)?;
            let n_arch = outcome.state.specs.len();
            for m in outcome.state.history.iter().rev().take(n_arch).rev() {
                println!(
                    "round {} {}: accuracy {:.4} loss {:.4}",
                    m.round,
                    m.architecture.name(),
                    m.test_accuracy,
                    m.test_loss
                );
            }
            for em in &outcome.ensemble_metrics {
                println!(
                    "round {} {}: accuracy {:.4} loss {:.4}",
                    outcome.state.round, em.name, em.test_accuracy, em.test_loss
                );
            }
            println!("artifacts in {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { checkpoint_dir, data } => {
            let rows = run_evaluate(&checkpoint_dir, &data)?;
            for row in rows {
                println!("{}: accuracy {:.4} loss {:.4}", row.name, row.accuracy, row.loss);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => run_gradcheck(),
    }
}

/// Loads and validates the config, applies the environment seed
/// override, and fixes the output directory (flag wins over config).
fn resolve(
    config_path: PathBuf,
    out: Option<PathBuf>,
) -> Result<(ExperimentConfig, PathBuf), AppError> {
    let mut config = load_config(&config_path)?;
    if let Some(seed) = seed_override_from_env()? {
        config.seed = seed;
    }
    let out = out
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| AppError::Config("no output directory: pass --out or set out_dir".into()))?;
    config.out_dir = Some(out.display().to_string());
    Ok((config, out))
}

/// One line per architecture with its worst error over the fixed probe
/// seeds; exit 0 only if every architecture passes.
fn run_gradcheck() -> Result<ExitCode, AppError> {
    let mut all_pass = true;
    for spec in gradcheck_specs() {
        let mut worst = 0.0f64;
        for &seed in &GRADCHECK_SEEDS {
            let err = grad_check(&spec, seed)
                .map_err(|e| AppError::Runtime(format!("{}: {e}", spec.architecture.name())))?;
            worst = worst.max(err);
        }
        let pass = worst < PASS_THRESHOLD;
        all_pass &= pass;
        println!(
            "{}: max relative error {:.3e} ({})",
            spec.architecture.name(),
            worst,
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
