use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a single element, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("tensor is not recorded on this tape")]
    DetachedTensor,
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),
    #[error("gamma must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("pooling window {window} does not fit input {height}x{width}")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    #[error("batch normalization over an empty batch")]
    EmptyBatch,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no mask found for {0}")]
    MissingMask(PathBuf),
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("crop would be empty")]
    DegenerateCrop,
    #[error("class {0} has no samples")]
    EmptyClass(String),
    #[error("invalid split fractions ({0}, {1})")]
    InvalidFractions(f64, f64),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
