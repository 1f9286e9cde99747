//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem failure while reading or writing an artifact.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// PNG decode or encode failure.
    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// PNG sample layout this pipeline does not accept.
    #[error("unsupported pixel format in {path}: {detail}")]
    UnsupportedPixelFormat { path: PathBuf, detail: String },

    /// Malformed tensor container or JSON sidecar.
    #[error("malformed artifact {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Caller passed an argument outside the documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Inputs are structurally valid but inconsistent with each other
    /// (shape mismatches, empty datasets, missing labels, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Iterative numerics produced non-finite values or ran away.
    #[error("numerical divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    /// A fit did not meet the configured quality cut.
    #[error("quality cut failed: {0}")]
    QualityCut(String),
}

impl Error {
    /// Shorthand for [`Error::Io`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for [`Error::Format`].
    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
