use thiserror::Error;

use crate::image::ImageError;
use crate::puppet::PuppetError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Puppet(#[from] PuppetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{op}: shape mismatch {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward: {0}")]
    Backward(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("mask covers no pixels; the character has collapsed")]
    DegenerateMask,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("model is untrained; refusing to {0}")]
    Untrained(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Numeric failures (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DegenerateMask | Error::Diverged(_))
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
