//! `trafficformer` command line: synthesize data, preprocess, train,
//! evaluate and export attention maps, all driven by one flat TOML config.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::SplitName;
use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<trafficformer::Error> for CliError {
    fn from(e: trafficformer::Error) -> Self {
        use trafficformer::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) => CliError::Config(e.to_string()),
            E::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "trafficformer", version, about = "Delay-aware traffic flow forecasting pipeline")]
struct Cli {
    /// Flat TOML config; built-in desk preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic delayed ring as flow.csv and edges.csv.
    Synth,
    /// Build masks, Laplacian basis, patterns and scaler from the training split.
    Preprocess,
    /// Train from preprocessed artifacts and write the best checkpoint.
    Train {
        /// Overrides `max_epochs`; 0 writes the initialized checkpoint.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        /// Defaults to `<out_dir>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Skip truth values below this flow (overrides the config).
        #[arg(long)]
        filter_threshold: Option<f64>,
    },
    /// Dump every attention matrix of one sample as JSON lines.
    ExportAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 0)]
        sample_index: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    let default_checkpoint = cfg.out_dir.join(commands::CHECKPOINT);
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Preprocess => commands::preprocess_cmd(&cfg),
        Command::Train { epochs } => commands::train_cmd(&cfg, epochs),
        Command::Evaluate {
            checkpoint,
            split,
            filter_threshold,
        } => {
            if filter_threshold.is_some() {
                cfg.filter_threshold = filter_threshold;
            }
            commands::evaluate_cmd(&cfg, &checkpoint.unwrap_or(default_checkpoint), split)
        }
        Command::ExportAttention {
            checkpoint,
            split,
            sample_index,
        } => commands::export_attention(&cfg, &checkpoint.unwrap_or(default_checkpoint), split, sample_index),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
