use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments: dimension mismatch, non-finite values, bad labels.
    #[error("input error: {0}")]
    Input(String),
    /// The dataset cannot satisfy a request (too few identities, empty, ...).
    #[error("dataset error: {0}")]
    Dataset(String),
    /// Gallery/probe construction or ranking failed.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Non-finite loss or gradient during optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Bad configuration value or unknown option.
    #[error("usage error: {0}")]
    Usage(String),
    /// Corrupt or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class: 1 usage, 2 input/data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
