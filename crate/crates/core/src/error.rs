use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid label value {value} at voxel {index} (allowed: 0, 1, 2, 4)")]
    InvalidLabel { value: i64, index: usize },

    #[error("case directory {dir} is missing the {modality} volume")]
    MissingModality { dir: PathBuf, modality: String },

    #[error("modality {modality} is all zero; cannot normalize")]
    EmptyModality { modality: String },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("nifti error in {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
