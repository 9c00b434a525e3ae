use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch at {edge}: expected {expected}, found {found}")]
    Shape {
        edge: String,
        expected: String,
        found: String,
    },

    #[error("channel {channel} is entirely missing")]
    MissingChannel { channel: usize },

    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("container checksum mismatch (expected {expected}, found {found})")]
    Checksum { expected: String, found: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("freeze contract violated: {0}")]
    FreezeViolation(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(edge: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            edge: edge.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
