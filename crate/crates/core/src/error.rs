use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the audit pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset not found: {0}")]
    DatasetNotFound(String),
    #[error("decode error in {file} at record {index}: {reason}")]
    Decode {
        file: String,
        index: usize,
        reason: String,
    },
    #[error("insufficient data: requested {requested} samples, dataset holds {available}")]
    InsufficientData { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("numeric fault at sample {index}: {what}")]
    NumericFault { index: usize, what: String },
    #[error("capability unavailable: {0}")]
    Capability(String),
    #[error("halted after {completed} completed cells")]
    Halted { completed: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
