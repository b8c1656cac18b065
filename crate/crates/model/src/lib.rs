//! Network builders and training objectives for the volumetric generative
//! pipeline: WGAN-GP critic and generator, VAE encoder/decoder, the
//! introspective-VAE pairing, a shallow V-Net segmenter, and every scalar
//! loss they are trained with, plus a finite-difference gradient harness.

pub mod losses;
pub mod nets;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    /// Configuration that cannot produce a valid architecture.
    #[error("architecture error: {0}")]
    Architecture(String),

    /// Tensor shapes that violate an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;
