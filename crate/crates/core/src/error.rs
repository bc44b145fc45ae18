use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used in CLI error documents.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidThresholds(_) => "invalid-thresholds",
            Error::EmptyResult(_) => "empty-result",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Format(_) => "format-error",
            Error::Io(_) => "io-error",
            Error::Json(_) => "format-error",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
