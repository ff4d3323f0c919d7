//! `sleepnet`: data generation, training, threshold sweeps, evaluation and
//! prediction for joint sleep event detection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sleepnet::EventClass;

use config::Variant;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    Config(String),
    /// Failure while running; exit code 3.
    Runtime(String),
}

impl From<sleepnet::Error> for CliError {
    fn from(e: sleepnet::Error) -> Self {
        match e {
            sleepnet::Error::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sleepnet",
    version,
    about = "Joint detection of arousals, limb movements and sleep-disordered breathing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-level reproducibility.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (or file, for `predict`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a train/eval/test manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the train split, selecting the best epoch on the eval split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Head type and weight decay.
        #[arg(long, value_enum, default_value = "splitstream")]
        variant: Variant,
        /// Train a single-stream model for one event class.
        #[arg(long, value_parser = parse_class)]
        single_event: Option<EventClass>,
    },
    /// Choose per-class thresholds maximizing F1 on the eval split.
    SweepThreshold {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a model on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Thresholds JSON written by `sweep-threshold`.
        #[arg(long)]
        thresholds: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Detect events in one record and write them as JSON.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        /// Record file.
        #[arg(long)]
        record: PathBuf,
    },
    /// Train the joint model and one single-event model per class, then
    /// compare them on the test split.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "splitstream")]
        variant: Variant,
    },
}

fn parse_class(s: &str) -> Result<EventClass, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train {
            common,
            manifest,
            variant,
            single_event,
        } => commands::train(&common, &manifest, variant, single_event),
        Command::SweepThreshold {
            common,
            checkpoint,
            manifest,
        } => commands::sweep(&common, &checkpoint, &manifest),
        Command::Evaluate {
            common,
            checkpoint,
            thresholds,
            manifest,
        } => commands::evaluate(&common, &checkpoint, &thresholds, &manifest),
        Command::Predict {
            common,
            checkpoint,
            thresholds,
            record,
        } => commands::predict(&common, &checkpoint, &thresholds, &record),
        Command::Compare {
            common,
            manifest,
            variant,
        } => commands::compare(&common, &manifest, variant),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
