use thiserror::Error;

/// Errors surfaced by the training and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported layer capability: {0}")]
    Capability(String),

    #[error("underivable layer shapes: {0}")]
    Specification(String),

    #[error("report comparison mismatch: {0}")]
    Comparison(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
