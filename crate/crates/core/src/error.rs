use thiserror::Error;

pub type Result<T> = std::result::Result<T, EmmError>;

#[derive(Debug, Error)]
pub enum EmmError {
    /// Operand dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Caller supplied a value outside an operation's contract.
    #[error("input error: {0}")]
    Input(String),

    /// Optimization produced a non-finite loss or gradient.
    #[error("training error: {0}")]
    Training(String),

    /// A training call targeted a frozen expert.
    #[error("expert {0} is frozen")]
    Frozen(usize),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed dataset file. `offset` is the byte position where parsing failed.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl EmmError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }
}
