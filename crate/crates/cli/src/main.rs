//! `kscan` — command-line front end for the reconstruction pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
//! failure. Every run directory receives exactly one `manifest.json`.

mod commands;
mod manifest;
mod preview;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kscan::config::RunConfig;
use kscan::error::{Error, Result};

use commands::Ctx;

#[derive(Parser)]
#[command(name = "kscan", version, about = "Undersampled k-space reconstruction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration TOML; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this run
    #[arg(long)]
    out: PathBuf,
    /// Override the seed used for data, initialization, and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Override the acceleration factor
    #[arg(long, value_parser = parse_af)]
    af: Option<usize>,
    /// Override the patch size
    #[arg(long, value_parser = parse_patch)]
    patch: Option<usize>,
    /// Compute device; only "cpu" is available in this build
    #[arg(long, default_value = "cpu")]
    device: String,
}

fn parse_af(s: &str) -> std::result::Result<usize, String> {
    match s {
        "4" => Ok(4),
        "8" => Ok(8),
        other => Err(format!("acceleration factor must be 4 or 8, got {other}")),
    }
}

fn parse_patch(s: &str) -> std::result::Result<usize, String> {
    match s {
        "1" => Ok(1),
        "2" => Ok(2),
        "4" => Ok(4),
        other => Err(format!("patch size must be 1, 2, or 4, got {other}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms or ingest volumes and write a dataset directory
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, writing checkpoints, logs, and per-epoch reports
    Train {
        #[command(flatten)]
        common: Common,
        /// Existing dataset directory (from `simulate`); the config's data
        /// source is materialized on the fly when omitted
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue a run from its saved optimizer state and last checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct a dataset with a checkpoint: previews, raw tensors, error maps
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint to load
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory to reconstruct
        #[arg(long)]
        dataset: PathBuf,
        /// Reconstruct only the first N slices
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score a checkpoint (or the zero-filling baseline) against targets
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; the zero-filling baseline when omitted
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory to evaluate on
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train every gate/placement/kernel variant and tabulate the results
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common }
            | Command::Train { common, .. }
            | Command::Reconstruct { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ablate { common } => common,
        }
    }
}

fn build_ctx(common: &Common) -> Result<Ctx> {
    if common.device != "cpu" {
        return Err(Error::Config(format!(
            "device {:?} is not available; this build is CPU-only",
            common.device
        )));
    }
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(af) = common.af {
        cfg.train.af = af;
    }
    if let Some(patch) = common.patch {
        cfg.model.patch = patch;
    }
    cfg.validate()?;
    Ok(Ctx { cfg, config_path: common.config.clone(), out: common.out.clone() })
}

fn run(cli: Cli) -> Result<()> {
    let ctx = build_ctx(cli.command.common())?;
    match &cli.command {
        Command::Simulate { .. } => commands::cmd_simulate(&ctx),
        Command::Train { dataset, resume, .. } => {
            commands::cmd_train(&ctx, dataset.as_deref(), *resume)
        }
        Command::Reconstruct { checkpoint, dataset, limit, .. } => {
            commands::cmd_reconstruct(&ctx, checkpoint, dataset, *limit)
        }
        Command::Evaluate { checkpoint, dataset, .. } => {
            commands::cmd_evaluate(&ctx, checkpoint.as_deref(), dataset, cli.command.common().af)
        }
        Command::Ablate { .. } => commands::cmd_ablate(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
