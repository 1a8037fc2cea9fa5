use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint corruption: {0}")]
    Corruption(String),

    #[error("embedding failure: {0}")]
    Embedding(String),

    #[error("trigger generation shortfall: need {needed} qualifying candidates, have {available}")]
    GenerationShortfall { needed: usize, available: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at step {0}")]
    NonFinite(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
