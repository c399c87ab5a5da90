use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("estimation failure: {0}")]
    EstimationFailure(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::SizeMismatch { .. } => "size-mismatch",
            Error::Shape(_) => "shape",
            Error::Degenerate(_) => "degenerate",
            Error::EstimationFailure(_) => "estimation-failure",
            Error::Config { .. } => "config",
            Error::Compatibility(_) => "compatibility",
            Error::Parse { .. } => "parse",
            Error::NonFinite { .. } => "non-finite",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
