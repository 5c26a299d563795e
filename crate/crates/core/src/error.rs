use thiserror::Error;

/// Errors raised anywhere in the training laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("unsupported question: {0}")]
    UnsupportedQuestion(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("internal error: {0}")]
    Internal(String),

    /// A loss or objective went non-finite. `dump` holds a JSONL diagnostic of the offending batch.
    #[error("non-finite value in {context}")]
    NonFinite { context: String, dump: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Vocabulary(_) | Error::Json(_) => ErrorKind::Config,
            _ => ErrorKind::Runtime,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Encoding(_) => "encoding",
            Error::Vocabulary(_) => "vocabulary",
            Error::UnsupportedQuestion(_) => "unsupported_question",
            Error::Input(_) => "input",
            Error::Internal(_) => "internal",
            Error::NonFinite { .. } => "non_finite",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
