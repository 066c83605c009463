use std::path::PathBuf;

use udcvr_core::CoreError;
use udcvr_synth::SynthError;
use udcvr_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss at iteration {iter}; batch: {}", batch.join("; "))]
    NonFinite { iter: u64, batch: Vec<String> },
}

pub type Result<T> = std::result::Result<T, NetError>;
