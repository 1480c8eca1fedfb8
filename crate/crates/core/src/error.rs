use thiserror::Error;

use crate::lm::Token;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    InvalidToken { token: Token, vocab: usize },

    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("enumeration needs {needed} rollouts, limit is {limit}")]
    Capacity { needed: u128, limit: u128 },

    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
