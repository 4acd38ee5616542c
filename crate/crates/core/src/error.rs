use std::path::PathBuf;

use thiserror::Error;

use crate::io::nifti::NiftiError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {axis}={value} out of range 0..{extent}")]
    OutOfBounds {
        axis: &'static str,
        value: usize,
        extent: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: String, found: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("grouping table: {0}")]
    Grouping(String),
    #[error("mask generation: {0}")]
    Mask(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("atlas affine is singular")]
    SingularAffine,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::DimMismatch {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}
