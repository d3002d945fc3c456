use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the platform.
///
/// Variants follow the failure categories of the system: shape problems in the
/// kernels, malformed nets and jobs, protocol violations between execution
/// units, and file-format problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequencing error in layer `{layer}`: {reason}")]
    Sequencing { layer: String, reason: String },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("validation error at `{path}`: {reason}")]
    Validation { path: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format error in {path:?} at {location}: {reason}")]
    Format {
        path: PathBuf,
        location: String,
        reason: String,
    },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: u64, loss: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("execution unit stopped")]
    Stopped,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn sequencing(layer: &str, reason: impl Into<String>) -> Self {
        Error::Sequencing {
            layer: layer.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn validation(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
