use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("line {line}: invalid dialogue: {reason}")]
    InvalidRecord { line: usize, reason: String },

    #[error("invalid dialogue: {0}")]
    InvalidDialogue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{kind} ordinal {ordinal} out of range (max {max})")]
    OrdinalOutOfRange {
        kind: &'static str,
        ordinal: usize,
        max: usize,
    },

    #[error("malformed vocabulary file: {0}")]
    Vocab(String),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("no positions contribute to the loss")]
    EmptyLoss,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("sequence has no masked structure positions")]
    NothingMasked,

    #[error("length mismatch: {candidates} candidates vs {references} references")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
