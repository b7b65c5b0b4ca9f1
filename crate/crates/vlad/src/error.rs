//! Error types and process exit-code mapping.

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        shape: Vec<usize>,
    },

    #[error("cross-entropy target {target} out of range for vocabulary size {vocab}")]
    TargetOutOfRange { target: i64, vocab: usize },

    #[error("rotary embedding requires an even head dimension, got {dim}")]
    OddHeadDim { dim: usize },

    #[error("backward called twice without resetting gradients")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Crate-level error covering model assembly, training, evaluation and IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("sequence length {len} exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("caption must be non-empty")]
    EmptyCaption,

    #[error("hypothesis must be non-empty")]
    EmptyHypothesis,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path} line {line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown parameter name: {0}")]
    UnknownParam(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 0 success, 1 usage error, 2 data error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
