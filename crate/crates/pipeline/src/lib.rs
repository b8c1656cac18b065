//! Training pipelines for the four generative models and the V-Net
//! segmenter, with resumable checkpoints, loss traces, synthetic-dataset
//! generation, and the Dice-table evaluation protocol.

pub mod checkpoint;
pub mod config;
pub mod evaluation;
pub mod optim;
pub mod synthesis;
pub mod trace;
pub mod train;

use cranio_core::CoreError;
use cranio_model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training aborted on a non-finite loss; the state at failure is
    /// attached so the caller can persist it.
    #[error("non-finite loss at epoch {epoch} step {step}: {message}")]
    NonFinite {
        epoch: usize,
        step: u64,
        message: String,
        checkpoint: Box<checkpoint::Checkpoint>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A generated sample lost a required channel during postprocessing.
    #[error("degenerate sample: empty {which} channel")]
    Degenerate { which: &'static str },

    /// Synthesis exceeded its oversampling budget.
    #[error("quality error: {0}")]
    Quality(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
