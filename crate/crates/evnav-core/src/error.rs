//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed file content; `offset` is the byte position of the defect.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Shape or bounds mismatch between tensors, layers, or grids.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Undefined statistics, e.g. batch normalization over zero active sites.
    #[error("statistics error: {0}")]
    Statistics(String),

    /// Bad run configuration (missing dataset, incompatible stage, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Numerical failure during optimization, naming the offending parameter.
    #[error("training error: {0}")]
    Training(String),

    /// Synthetic-data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
