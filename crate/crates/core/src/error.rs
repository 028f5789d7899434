use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: not a BLCF tensor", path.display())]
    BadMagic { path: PathBuf },
    #[error("{}: unsupported tensor format version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("{}: truncated tensor ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },
    #[error("non-finite values in {context}")]
    NonFinite { context: String },
    #[error("invalid tensor shape: {0}")]
    Shape(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: cannot decode image: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the underlying storage rather than of the data or configuration.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Decode {
                    source: image::ImageError::IoError(_),
                    ..
                }
        )
    }
}
