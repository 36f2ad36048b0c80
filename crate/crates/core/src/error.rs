use std::path::PathBuf;

/// Errors surfaced by every stage of the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("index {index} out of range 0..{len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A loss, velocity, or state became NaN/inf.
    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(String),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.to_string(),
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}
