use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid construction parameters or an incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called on an argument it does not support.
    #[error("usage error: {0}")]
    Usage(String),
    /// A numeric precondition was violated.
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, Error>;
