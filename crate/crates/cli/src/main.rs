use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use finsent_cli::commands::{self, CliError};
use finsent_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "finsent",
    version,
    about = "Train and evaluate a small financial sentiment encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run masked-LM (and optional next-sentence) pre-training on a corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune for classification or regression per the config kind.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Starting checkpoint; omitted means random initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one of the ablation grids and emit one CSV row per cell.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretty-print the reports found in an output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(path: &std::path::Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::Pretrain { config, seed, out } => {
            let config = load_config(&config, seed)?;
            commands::cmd_pretrain(&config, &out)
        }
        Command::Finetune {
            config,
            seed,
            out,
            checkpoint,
        } => {
            let config = load_config(&config, seed)?;
            commands::cmd_finetune(&config, checkpoint.as_deref(), &out)
        }
        Command::Ablate {
            config,
            seed,
            out,
            checkpoint,
        } => {
            let config = load_config(&config, seed)?;
            commands::cmd_ablate(&config, checkpoint.as_deref(), &out)
        }
        Command::Report { dir } => commands::cmd_report(&dir),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
