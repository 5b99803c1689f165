use std::path::PathBuf;

use revealtoy_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("image size mismatch: {0}")]
    SizeMismatch(String),

    #[error("box {index}: {reason}")]
    InvalidBox { index: usize, reason: String },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("png: {0}")]
    Png(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("scene {scene}: {detail}")]
    Dataset { scene: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
    let path = path.into();
    move |source| Error::Json { path, source }
}
