use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// API misuse: backward on a detached tensor, counting without a forward, etc.
    #[error("usage error: {0}")]
    Usage(String),

    /// A value that must be finite is not.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A spike-only path received a non-binary operand.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Dataset ingestion failure; the message names the offending record.
    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for the command-line driver: 2 usage or
    /// configuration, 3 data or files, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 4,
            Error::Data(_) | Error::Load(_) | Error::Io(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
