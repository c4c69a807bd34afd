//! Error types shared across the crate.

use thiserror::Error;

/// Shape or usage violation in the tensor core.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("value buffer of length {len} does not fill dims {dims:?}")]
    LengthMismatch { dims: Vec<usize>, len: usize },

    #[error("expected rank-{expected} tensor, got dims {dims:?}")]
    RankMismatch { expected: usize, dims: Vec<usize> },

    #[error("{op}: expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },

    #[error("{op}: {what}")]
    Unsupported { op: &'static str, what: String },

    #[error("backward target must be a scalar, got dims {dims:?}")]
    NonScalarLoss { dims: Vec<usize> },

    #[error("tensor id {id} is not on this tape")]
    UnknownId { id: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        TensorError::ShapeMismatch { op, expected: expected.into(), got: got.into() }
    }

    pub(crate) fn unsupported(op: &'static str, what: impl Into<String>) -> Self {
        TensorError::Unsupported { op, what: what.into() }
    }
}

/// Failure anywhere in the data/training/CLI pipeline. File-format
/// problems carry the byte offset where parsing stopped.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {what} at byte {offset}")]
    Format { path: String, offset: usize, what: String },

    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<String>, offset: usize, what: impl Into<String>) -> Self {
        PipelineError::Format { path: path.into(), offset, what: what.into() }
    }

    pub(crate) fn invalid(what: impl Into<String>) -> Self {
        PipelineError::Invalid(what.into())
    }
}
