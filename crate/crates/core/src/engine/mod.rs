//! Training, evaluation, confidence intervals over repeated trials, the
//! SNR robustness sweep and checkpoint serialization.

mod checkpoint;
mod data;
mod eval;
mod stats;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{clips_from_manifest, ClipSource, Featurizer, LabeledClip};
pub use eval::{
    evaluate, evaluate_manifest, format_sweep_table, snr_sweep, EvalReport, SnrPoint, SnrSweepReport,
    DEFAULT_NOISE_DRAWS, DEFAULT_SNR_POINTS_DB,
};
pub use stats::trials_ci;
pub use train::{train, with_worker_pool, DatasetPaths, EpochMetrics, TrainConfig, TrainData, TrainOutcome};

use thiserror::Error;

use crate::audio::AudioError;
use crate::augment::AugmentError;
use crate::dataset::DatasetError;
use crate::features::FeatureError;
use crate::model::ModelError;
use crate::nn::NnError;
use crate::optim::OptimError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("noise pool is empty")]
    EmptyNoisePool,
    #[error("label set mismatch: {0}")]
    LabelSetMismatch(String),
    #[error("need at least two trials, got {0}")]
    TooFewTrials(usize),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt tensor data: {0}")]
    CorruptTensor(String),
    #[error("corrupt checkpoint config: {0}")]
    CorruptConfig(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("worker pool: {0}")]
    WorkerPool(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl EngineError {
    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::EmptyEvalSet => "EmptyEvalSet",
            EngineError::EmptyNoisePool => "EmptyNoisePool",
            EngineError::LabelSetMismatch(_) => "LabelSetMismatch",
            EngineError::TooFewTrials(_) => "TooFewTrials",
            EngineError::BadMagic => "BadMagic",
            EngineError::VersionMismatch { .. } => "VersionMismatch",
            EngineError::CorruptTensor(_) => "CorruptTensor",
            EngineError::CorruptConfig(_) => "CorruptConfig",
            EngineError::InvalidConfig(_) => "InvalidConfig",
            EngineError::WorkerPool(_) => "WorkerPool",
            EngineError::Io { .. } => "Io",
            EngineError::Audio(e) => e.kind(),
            EngineError::Dataset(e) => e.kind(),
            EngineError::Feature(e) => e.kind(),
            EngineError::Augment(e) => e.kind(),
            EngineError::Model(e) => e.kind(),
            EngineError::Nn(e) => e.kind(),
            EngineError::Optim(e) => e.kind(),
        }
    }

    /// Internal invariant violations, as opposed to bad input or data.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            EngineError::Nn(NnError::ShapeMismatch(_) | NnError::NoGraph)
                | EngineError::Model(ModelError::Nn(NnError::ShapeMismatch(_) | NnError::NoGraph))
                | EngineError::Optim(OptimError::StateMismatch(_))
                | EngineError::WorkerPool(_)
        )
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.display().to_string(),
        source,
    }
}
