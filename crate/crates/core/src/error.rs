use thiserror::Error;

/// Errors raised by tensor operations, layer construction and model I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
