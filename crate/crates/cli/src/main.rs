//! Batch CLI for the DAE timestepper experiments: dataset generation,
//! training, evaluation, extrapolation, and gradient checking, driven by a
//! TOML experiment configuration.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{cmd_eval, cmd_extrapolate, cmd_generate, cmd_gradcheck, cmd_train, CliError, Scenario};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "daestep",
    about = "Learn unknown components of semi-explicit index-1 DAE flow networks from time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a ground-truth dataset (optionally noised) and write it as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the experiment model on a dataset; writes a checkpoint and report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Open-loop rollout of a trained checkpoint against a reference dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a trained checkpoint out on an unseen scenario.
    Extrapolate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        scenario: Scenario,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare rollout-loss gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Rollout horizon in steps.
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        #[arg(long, default_value_t = 1e-6)]
        fd_step: f64,
        /// Maximum acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path).map_err(CliError::Config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::Generate { config, out, seed } => {
            let config = load_config(&config, seed)?;
            cmd_generate(&config, &out)
        }
        Command::Train {
            config,
            dataset,
            out,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            cmd_train(&config, &dataset, &out)
        }
        Command::Eval {
            config,
            checkpoint,
            dataset,
            out,
        } => {
            let config = load_config(&config, None)?;
            cmd_eval(&config, &checkpoint, &dataset, &out)
        }
        Command::Extrapolate {
            config,
            checkpoint,
            scenario,
            out,
        } => {
            let config = load_config(&config, None)?;
            cmd_extrapolate(&config, &checkpoint, scenario, &out)
        }
        Command::Gradcheck {
            config,
            horizon,
            fd_step,
            tolerance,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            cmd_gradcheck(&config, horizon, fd_step, tolerance)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
