use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {msg}")]
    Codec { path: PathBuf, msg: String },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("missing frame {0}")]
    MissingFrame(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("point(s) map to infinity: {0:?}")]
    PointAtInfinity(Vec<(f64, f64)>),
    #[error("singular homography (det = {0:e})")]
    Singular(f64),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        CoreError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
