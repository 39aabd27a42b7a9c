use std::path::PathBuf;

use thiserror::Error;

use crate::bundle::BundleError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the seen class set is empty")]
    EmptySeen,
    #[error("no candidate classes to predict from")]
    NoCandidates,
    #[error("class {0} has no description bank")]
    MissingBank(u32),
    #[error("model/bundle mismatch: {0}")]
    Mismatch(String),
    #[error("attention export requires an adaptive-mode model")]
    NotAdaptive,
    #[error("unknown sample {0:?}")]
    UnknownSample(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: e.to_string(),
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        Error::Json {
            path: path.into(),
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
