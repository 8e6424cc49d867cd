use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("transition {index}: {message}")]
    Input { index: usize, message: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("episode already finished; call reset before stepping")]
    EpisodeFinished,

    #[error("config: {0}")]
    Config(String),

    #[error("contraction ratio undefined: the two tables are identical")]
    UndefinedRatio,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
