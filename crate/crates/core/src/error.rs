use std::path::PathBuf;

use thiserror::Error;

use crate::params::ModelParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is singular")]
    Singular,

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    /// Training produced a non-finite loss. Carries the last parameters
    /// whose loss was finite.
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<ModelParams>,
    },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
