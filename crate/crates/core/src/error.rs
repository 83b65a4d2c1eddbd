use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KerlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KerlError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("missing prerequisite: {0}")]
    Missing(String),
}

impl KerlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KerlError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        KerlError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by numeric breakdown rather than bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, KerlError::NonFinite { .. } | KerlError::Diverged { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(self, KerlError::Io { .. } | KerlError::Parse { .. })
    }
}
