use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{modality}: shape mismatch, manifest declares {declared:?} but data holds {actual} values")]
    ShapeMismatch { modality: String, declared: Vec<usize>, actual: usize },

    #[error("{modality}: {message}")]
    Modality { modality: String, message: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { term: String, epoch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures reading or writing the filesystem (including
    /// malformed or inconsistent stored artifacts).
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Manifest { .. } | Error::ShapeMismatch { .. } | Error::Modality { .. } | Error::NonFinite { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
