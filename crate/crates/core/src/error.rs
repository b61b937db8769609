use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("log line has no tokens after preprocessing")]
    EmptyContent,
    #[error("template table is empty")]
    NoTemplates,
    #[error("sequence length {len} exceeds max_len {max}")]
    OverLength { len: usize, max: usize },
    #[error("key id {id} is outside the vocabulary of size {vocab}")]
    BadId { id: usize, vocab: usize },
    #[error("top-k of {k} is invalid for a vocabulary of size {vocab}")]
    BadK { k: usize, vocab: usize },
    #[error("vocabulary mismatch: model has {model} outputs, corpus has {corpus} keys")]
    VocabMismatch { model: usize, corpus: usize },
    #[error("need {needed} normal sequences for training, only {available} available")]
    InsufficientNormal { needed: usize, available: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed grammar: {0}")]
    MalformedGrammar(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::ShapeMismatch { op, detail }
    }
}
