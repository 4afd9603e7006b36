use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PahsError>;

#[derive(Debug, Error)]
pub enum PahsError {
    /// A tensor did not have the extent an operation requires along some axis.
    #[error("shape mismatch in {op}: axis {axis} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PahsError {
    pub fn shape(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        PahsError::Shape {
            op,
            axis,
            expected,
            actual,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PahsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PahsError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the environment (files, permissions) rather than
    /// of the inputs' contents.
    pub fn is_io(&self) -> bool {
        matches!(self, PahsError::Io { .. })
    }
}
