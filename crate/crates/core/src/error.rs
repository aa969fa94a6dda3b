use thiserror::Error;

/// Errors produced by the tensor engine, data pipeline, training, and tasks.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch; the message names the offending shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument or violated invariant.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Malformed data file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint file problems (bad magic, version, truncation).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Loss or gradient became non-finite during training.
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
