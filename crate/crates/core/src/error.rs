//! Error types shared across the engine.

use thiserror::Error;

/// Errors raised by tensor operations and model forward passes.
#[derive(Debug, Clone, Error)]
pub enum TensorError {
    /// Two shapes that must agree do not.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation was configured inconsistently (stride/padding/counts).
    #[error("{op}: {msg}")]
    Config { op: &'static str, msg: String },
    /// `backward` was called on a non-scalar tensor.
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Errors raised while loading or generating datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("image {image} is {iw}x{ih} but mask {mask} is {mw}x{mh}")]
    DimensionMismatch {
        image: String,
        iw: usize,
        ih: usize,
        mask: String,
        mw: usize,
        mh: usize,
    },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
}

/// Errors raised by checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeDisagreement {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {name} missing from checkpoint")]
    MissingParam { name: String },
    #[error("checkpoint field {0} is malformed")]
    Malformed(String),
}

/// Errors raised by the training engine.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
