use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or mismatched dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied an input outside the valid domain (e.g. an action index).
    #[error("input error: {0}")]
    Input(String),

    /// A computation produced a non-finite value.
    #[error("numerical error at sample {index}: {message}")]
    Numerical { index: usize, message: String },

    /// Malformed text or binary data.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub(crate) fn numerical(index: usize, msg: impl Into<String>) -> Self {
        Error::Numerical {
            index,
            message: msg.into(),
        }
    }

    /// True for errors that should abort a single update but not the run.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}
