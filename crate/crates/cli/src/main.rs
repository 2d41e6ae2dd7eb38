//! `vipt`: prompt-tuned multi-modal tracking at desk scale.
//!
//! Subcommands: `gen` (synthetic datasets), `train` (prompt-tuning),
//! `eval` (one-pass tracking + metrics), `gradcheck` (finite-difference
//! verification), `audit` (parameter accounting).
//!
//! Exit codes: 0 success, 2 usage/config error, 3 runtime numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vipt_core::error::Error;

#[derive(Parser)]
#[command(name = "vipt", version, about = "prompt-tuned multi-modal tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal dataset from a scene spec.
    Gen {
        /// Scene spec file (TOML, `[dataset]` section).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Prompt-tune on a dataset and write checkpoint, loss log and audit.
    Train {
        /// Run config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (overrides `data.train` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override `train.mode` from the config.
        #[arg(long)]
        mode: Option<String>,
        /// Print the parameter budget and exit without training.
        #[arg(long)]
        dry_run: bool,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Track through every sequence of a dataset and report metrics.
    Eval {
        /// Run config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (overrides `data.eval` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for result files and the report.
        #[arg(long)]
        out: PathBuf,
        /// Report ground truth as the prediction (metric plumbing check).
        #[arg(long)]
        oracle: bool,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of the full model gradient (toy scale only).
    Gradcheck {
        /// Run config file (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Parameter table with trainable flags and per-variant totals.
    Audit {
        /// Run config file (TOML).
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen { spec, out, force } => commands::gen(&spec, &out, force),
        Command::Train { config, data, out, mode, dry_run, force } => {
            commands::train(&config, data.as_deref(), &out, mode.as_deref(), dry_run, force)
        }
        Command::Eval { config, checkpoint, data, out, oracle, force } => {
            commands::eval(&config, &checkpoint, data.as_deref(), &out, oracle, force)
        }
        Command::Gradcheck { config } => commands::gradcheck(&config),
        Command::Audit { config } => commands::audit(&config),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
