use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid dimensions {0:?}: every axis needs at least 2 voxels")]
    InvalidDims([usize; 3]),

    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("phantom spec is infeasible: {0}")]
    Infeasible(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("bundle consistency error: {0}")]
    Consistency(String),

    #[error("need at least {needed} ids, got {got}")]
    TooFewIds { needed: usize, got: usize },

    #[error("volume too large for brute-force evaluation: {0} voxels (max 4096)")]
    VolumeTooLarge(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
