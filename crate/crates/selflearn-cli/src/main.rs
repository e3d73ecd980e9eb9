//! `selflearn`: configure, run, and report self-learning experiments.

mod config;
mod runner;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;
use selflearn::selftrain::Initialization;

#[derive(Parser)]
#[command(
    name = "selflearn",
    about = "Semi-supervised self-learning experiments with metric losses and transfer learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the fully labeled source dataset and write a checkpoint.
    Pretrain {
        /// Path to the JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the self-learning loop and write results.csv, manifest.json,
    /// and embeddings_final.csv.
    Selftrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `random` or a checkpoint path; overrides the config.
        #[arg(long)]
        init: Option<String>,
    },
    /// Run every sweep condition over consecutive seeds and aggregate
    /// mean and standard deviation per condition.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of runs per condition.
        #[arg(long)]
        seeds: usize,
        /// Reuse the configured seed for every run instead of incrementing.
        #[arg(long, default_value_t = false)]
        fixed_seed: bool,
    },
    /// Reload a checkpoint and report test accuracy on the configured
    /// dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.experiment.seed = seed;
            }
            runner::run_pretrain(&cfg, &out)?;
        }
        Command::Selftrain {
            config,
            out,
            seed,
            init,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.experiment.seed = seed;
            }
            if let Some(init) = init {
                cfg.experiment.init = if init == "random" {
                    Initialization::Random
                } else {
                    Initialization::Checkpoint(PathBuf::from(init))
                };
            }
            runner::run_selftrain(&cfg, &out)?;
        }
        Command::Sweep {
            config,
            out,
            seeds,
            fixed_seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            runner::run_sweep(&cfg, &out, seeds, fixed_seed)?;
        }
        Command::Eval {
            config,
            checkpoint,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            runner::run_eval(&cfg, &checkpoint, &out)?;
        }
    }
    Ok(())
}
