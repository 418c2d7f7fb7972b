use std::io;

/// Errors raised anywhere in the fusion toolkit.
///
/// The variants are grouped so that a command-line driver can map them onto
/// distinct exit codes: validation problems, I/O and file-format problems,
/// and numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("file format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by bad inputs or configuration, as opposed to
    /// I/O or numeric trouble.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Shape(_) | Error::Invalid(_) | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
