use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate ray: point coincides with the source")]
    DegenerateRay,
    #[error("point lies on or behind the source plane")]
    BehindSource,
    #[error("format error at `{key}`: {reason}")]
    Format { key: String, reason: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { key: key.into(), reason: reason.into() }
    }
}
