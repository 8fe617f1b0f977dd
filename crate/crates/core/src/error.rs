use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corpus too small: need at least {needed} tokens for batch size {batch_size} and bptt length {bptt_len}, got {got}")]
    CorpusTooSmall {
        needed: usize,
        got: usize,
        batch_size: usize,
        bptt_len: usize,
    },

    #[error("all unigram counts are zero")]
    EmptyDistribution,

    #[error("word id {0} has zero noise probability")]
    ZeroProbability(u32),

    #[error("non-finite activation at step {step} in layer {layer}")]
    NonFiniteActivation { step: usize, layer: usize },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("vocabulary hash mismatch: checkpoint has {expected}, vocabulary has {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed vocabulary file {path}: {message}")]
    VocabFile { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
