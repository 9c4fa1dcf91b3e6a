//! Command-line front end: corpus generation, staged pretraining, probes and
//! report comparison.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hierlearn::contrastive::StageSchedule;

#[derive(Debug, Parser)]
#[command(name = "hierlearn", version, about = "Coarse-to-fine contrastive pretraining and probes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run config; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Recorded in the run config; the training loop is single-writer.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic landmark corpus.
    GenData(GenDataArgs),
    /// Staged contrastive pretraining.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint.
    Probe(ProbeArgs),
    /// Compare probe outputs of several runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub jitter: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus manifest; defaults to a cached corpus built from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stages as `n:steps,...`, e.g. `0:1000,2:1000,4:1000`.
    #[arg(long)]
    pub schedule: Option<StageSchedule>,
    /// Disable negative pruning at every level.
    #[arg(long)]
    pub no_prune: bool,
    /// Train a single stage at level N for the schedule's total step count.
    #[arg(long, value_name = "N")]
    pub fixed_n: Option<u32>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub bank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeKind {
    Locality,
    Compositionality,
    Correspondence,
    Multires,
    Linear,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Locality => "locality",
            Self::Compositionality => "compositionality",
            Self::Correspondence => "correspondence",
            Self::Multires => "multires",
            Self::Linear => "linear",
        }
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(value_enum)]
    pub kind: ProbeKind,
    #[arg(long, alias = "checkpoint")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub patch_px: Option<usize>,
    #[arg(long)]
    pub max_images: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub arities: Option<Vec<usize>>,
    #[arg(long)]
    pub num_patches: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub image_a: Option<PathBuf>,
    #[arg(long)]
    pub image_b: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Probe output directories; the first is compared against the rest.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// Display names, one per run directory.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
}

/// Errors that map to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
