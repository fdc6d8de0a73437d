use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric fault in `{op}`: {detail}")]
    NumericFault { op: String, detail: String },
    #[error("pool exhausted: no unlabeled items remain")]
    PoolExhausted,
    #[error("no evidence: the labeled set is empty")]
    NoEvidence,
    #[error("missing embedding for id {0}")]
    MissingEmbedding(u64),
    #[error("missing popularity-entropy score for id {0}")]
    MissingScore(u64),
    #[error("episode generation failed: {0}")]
    Generation(String),
    #[error("training fault: {0}")]
    TrainingFault(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty store: {0}")]
    EmptyStore(String),
    #[error("unknown format tag `{0}`")]
    UnknownFormat(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(op: &str, detail: impl Into<String>) -> Self {
        Error::NumericFault {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}
