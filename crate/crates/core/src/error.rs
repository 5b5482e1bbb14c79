use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is singular: {0}")]
    Singular(&'static str),
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("malformed {what} in {path}: {reason}")]
    Format {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },
    #[error("missing file: {0}")]
    Missing(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        what: &'static str,
        path: impl Into<PathBuf>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Format {
            what,
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad arguments or configuration rather than
    /// by the data being processed.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Config(_))
    }
}
