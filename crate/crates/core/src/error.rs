//! Error type shared by the voxel and dataset layers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Two grids that must share dimensions do not.
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },

    /// Input values violate the operation's domain (e.g. non-finite reals).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A caller-supplied argument is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Phantom parameters that cannot produce a valid skull.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Defect carving could not hit the skull within the retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// Malformed `.vxg` payload; `offset` is the first offending byte.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
