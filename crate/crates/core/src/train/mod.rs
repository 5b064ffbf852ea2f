//! Training, evaluation, ranking and ablation drivers.

mod ablate;
mod config;
mod eval;
mod optim;
mod trainer;

use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::datastore::{FormatError, SplitError, SyntheticError};
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use ablate::{ablate, AblationRow, AblationTable};
pub use config::{AdapterOverrides, LrSchedule, TrainConfig, Variant, VariantSpec, REFERENCE_STEPS};
pub use eval::{evaluate, rank, score_items, EvalReport, QueryReport, RankedItem};
pub use optim::{clip_global_norm, AdamW, BETA1, BETA2, EPS};
pub use trainer::{train, StepLog, TrainOutcome, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model expects (p, d, t) = {model:?} but the data has {data:?}")]
    DimMismatch {
        model: (usize, usize, usize),
        data: (usize, usize, usize),
    },
    #[error("unknown query id {0}")]
    UnknownQuery(u32),
    #[error("non-finite loss or gradient at step {step}{}", saved.as_ref().map(|p| format!("; last good parameters saved to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss { step: u64, saved: Option<PathBuf> },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Model(ModelError),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(msg) => TrainError::Config(msg),
            other => TrainError::Model(other),
        }
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}
