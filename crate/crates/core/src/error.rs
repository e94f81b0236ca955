use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FocalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FocalError {
    #[error("invalid embedding matrix: {0}")]
    InvalidMatrix(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("instance `{id}`: shape mismatch: {reason}")]
    ShapeMismatch { id: String, reason: String },

    #[error("instance `{id}`: non-finite value in row {row}")]
    NonFinite { id: String, row: usize },

    #[error("instance `{id}`: {reason}")]
    InvalidInstance { id: String, reason: String },

    #[error("pair ({text}, {image}) references unknown id `{missing}`")]
    DanglingId {
        text: String,
        image: String,
        missing: String,
    },

    #[error("unknown instance id `{0}`")]
    UnknownId(String),

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FocalError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FocalError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        FocalError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
