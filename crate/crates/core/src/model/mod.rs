//! The direct encoder-decoder: configuration, parameters, training and
//! checkpoints.

mod checkpoint;
mod config;
mod network;
mod optim;
mod train;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, RngState, MAGIC, VERSION};
pub use config::{ArchitectureConfig, LayerSpec, ShapePlan};
pub use network::{build_direct, ForwardPass, LayerParams, Model, Prediction};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use train::{fit, train_step, LossBreakdown, LossWeights, TrainConfig, TrainSample};

use crate::autodiff::AutodiffError;
use crate::losses::LossError;
use crate::operators::OpError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("config error{}: {message}", match layer { Some((i, l)) => format!(" at layer {i} ({l})"), None => String::new() })]
    Config {
        layer: Option<(usize, String)>,
        message: String,
    },
    #[error("{0}")]
    Input(String),
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
