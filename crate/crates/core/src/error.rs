use thiserror::Error;

/// Errors raised by the alignment operators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Shapes of the inputs do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
