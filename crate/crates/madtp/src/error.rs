//! Error types shared across the engine.

use thiserror::Error;

/// Errors produced by the pruning engine and its harness.
#[derive(Debug, Error)]
pub enum MadtpError {
    /// An argument violated a precondition (shape mismatch, empty input, bad range).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input was structurally valid but numerically degenerate (zero norm, all-zero weights).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An operation was requested that the current configuration does not enable.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A serialized artifact failed its magic/version gate.
    #[error("format error: {0}")]
    Format(String),

    /// A serialized artifact declared one thing and contained another.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// The temperature controller hit its iteration cap before reaching the target band.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// A training step produced a non-finite loss; carries a diagnostic dump.
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },

    /// Filesystem failure, annotated with the path involved.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MadtpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MadtpError::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        MadtpError::DegenerateInput(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MadtpError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, MadtpError>;
