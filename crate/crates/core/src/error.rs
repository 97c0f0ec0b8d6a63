use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("notes not time-ordered")]
    NotTimeOrdered,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no MLM targets")]
    NoMlmTargets,

    #[error("undefined AUC: {0}")]
    UndefinedAuc(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label space mismatch")]
    LabelSpaceMismatch,

    #[error("unknown label: {0}")]
    UnknownLabel(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
