//! Memory bank, negative pruning, InfoNCE and the staged training loop.

mod bank;
mod config;
mod loss;
mod train;

pub use bank::MemoryBank;
pub use config::{Stage, StageSchedule, TrainConfig};
pub use loss::{batch_info_nce, cosine_sim, info_nce, keeps_negative, prune, BatchLoss, InfoNceGrad, PrunedBank};
pub use train::{cosine_lr, init_pair, StageRecord, StepGradient, StepRecord, StepStats, Trainer, TrainingLog};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::decomposer::DecomposeError;
use crate::embedder::{CheckpointError, EmbedError};
use crate::image::ImageError;

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ContrastError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
