//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by dataset generation, IO, configuration, and training.
#[derive(Debug, thiserror::Error)]
pub enum GvrtError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
}

impl GvrtError {
    /// Wrap an IO error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GvrtError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 for bad input, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            GvrtError::Config(_) | GvrtError::Unsupported(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, GvrtError>;
