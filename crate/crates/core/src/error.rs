use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not agree with what an operation requires.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A size, ratio or other setting is outside its valid range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
