use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("token `{token}` in {file}:{line} is not in the supplied vocabulary")]
    UnknownToken {
        token: String,
        file: PathBuf,
        line: usize,
    },

    #[error("{file}:{line}: empty document")]
    EmptyDocument { file: PathBuf, line: usize },

    #[error("slice `{label}` has {available} documents, cannot hold out {requested}")]
    SliceTooSmall {
        label: String,
        available: usize,
        requested: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exact enumeration refused: {hidden} hidden units exceeds the limit of {limit}")]
    EnumerationTooLarge { hidden: usize, limit: usize },

    #[error("non-finite value in `{parameter}` at epoch {epoch}")]
    NonFinite { parameter: String, epoch: usize },

    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, corpus {corpus}")]
    VocabularyMismatch { checkpoint: String, corpus: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
