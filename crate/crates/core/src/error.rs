use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("record {record}: missing required field `{field}`")]
    MissingField { record: usize, field: &'static str },

    #[error("record {record}: {message}")]
    Record { record: usize, message: String },

    #[error("example {id}: {message}")]
    Example { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot segment empty rule text")]
    EmptyRule,

    #[error("example {id}: input of {len} tokens exceeds max length {max}")]
    Truncation { id: String, len: usize, max: usize },

    #[error("relation {relation} references EDU {edu}, but only {n_edus} EDUs exist")]
    DanglingRelation {
        relation: usize,
        edu: usize,
        n_edus: usize,
    },

    #[error("EDU token spans overlap or are unordered at span {0}")]
    OverlappingSpans(usize),

    #[error("token id {id} outside vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
