//! MatchboxNet keyword spotting: WAV I/O, Speech Commands manifests, MFCC
//! features, augmentation, a small reverse-mode autodiff core, the
//! residual separable-convolution network, NovoGrad, training and
//! evaluation.

pub mod audio;
pub mod augment;
pub mod cli;
pub mod dataset;
pub mod engine;
pub mod features;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;

use thiserror::Error;

pub use audio::{AudioClip, AudioError};
pub use augment::{AugmentConfig, AugmentError};
pub use dataset::{DatasetError, LabelSet};
pub use engine::{Checkpoint, EngineError, TrainConfig};
pub use features::{FeatureConfig, FeatureError, FeatureMap};
pub use model::{count_params, ModelConfig, ModelError, Network};
pub use nn::NnError;
pub use optim::{OptimConfig, OptimError};

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Audio(e) => e.kind(),
            Error::Dataset(e) => e.kind(),
            Error::Feature(e) => e.kind(),
            Error::Augment(e) => e.kind(),
            Error::Nn(e) => e.kind(),
            Error::Model(e) => e.kind(),
            Error::Optim(e) => e.kind(),
            Error::Engine(e) => e.kind(),
        }
    }
}
