mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Volumetric residual CNN pipeline: phantoms, preprocessing, training,
/// transfer fine-tuning, evaluation and curve reports.
#[derive(Debug, Parser)]
#[command(name = "voxres", version)]
struct Cli {
    /// Worker threads for numeric kernels (0 = one per core).
    #[arg(long, global = true, env = "VOXRES_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat JSON file of dotted keys, e.g. {"train.lr": 0.001}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set model.stages=1. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace a non-empty output.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic phantoms, their lung masks and a manifest.
    GenPhantoms {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Mask, resample and normalize every volume of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding one mask per volume, under the volume's file name.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train from random initialization (undersampling by default).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Initialize from a checkpoint, then train (oversampling by default).
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print accuracy and AUC of a checkpoint on a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train, val, test or all; defaults to test when present.
        #[arg(long)]
        split: Option<String>,
        /// Also write the evaluation as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Merge run reports into one overlay CSV.
    Report {
        /// RUN_ID=RUN_DIR, repeatable.
        #[arg(long = "run", value_name = "ID=DIR", required = true)]
        runs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration, detected before any work.
    Usage(String),
    Runtime(String),
}

impl From<voxres::Error> for CliError {
    fn from(e: voxres::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenPhantoms { count, out, common } => commands::gen_phantoms(count, &out, &common),
        Command::Preprocess {
            manifest,
            masks,
            out,
            common,
        } => commands::preprocess(&manifest, &masks, &out, &common),
        Command::Train { manifest, out, common } => commands::train(&manifest, &out, &common),
        Command::Finetune {
            manifest,
            source,
            out,
            common,
        } => commands::finetune(&manifest, source.as_deref(), &out, &common),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            out,
            force,
        } => commands::evaluate(&checkpoint, &manifest, split.as_deref(), out.as_deref(), force),
        Command::Report { runs, out, force } => commands::report(&runs, &out, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
