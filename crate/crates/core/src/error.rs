use std::io;

use thiserror::Error;

use crate::data::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: payload needs {expected} bytes, found {found}")]
    Length { expected: u64, found: u64 },

    #[error("row {row} has zero norm")]
    DegenerateRow { row: usize },

    #[error("label {label} at position {index} is out of range for {classes} classes")]
    LabelRange {
        index: usize,
        label: u32,
        classes: usize,
    },

    #[error("duplicate token {token:?} on line {line}")]
    DuplicateToken { token: String, line: usize },

    #[error("vocabulary needs at least 2 tokens, found {0}")]
    VocabularySize(usize),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("token id {id} is out of range for a vocabulary of {size}")]
    TokenRange { id: TokenId, size: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("no cached embedding for token sequence {0:?}")]
    MissingEmbedding(Vec<u32>),

    #[error("class {class}: {source}")]
    Class {
        class: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty candidate set for class {class} at step {step}")]
    EmptyCandidates { step: usize, class: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("oracle bridge error: {0}")]
    Bridge(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn in_class(self, class: usize) -> Self {
        Error::Class {
            class,
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::InfeasibleSpec(_) => 2,
            Error::Bridge(_) => 4,
            Error::Class { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
