use thiserror::Error;

use crate::sipit::RecoveryResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("token id {token} out of vocabulary of size {vocab_size}")]
    Vocabulary { token: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds context {context}")]
    Context { len: usize, context: usize },

    #[error("layer {layer} out of range for a model with {blocks} blocks")]
    Layer { layer: usize, blocks: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("policy exhausted the vocabulary at position {position}")]
    Exhausted { position: usize },

    #[error(
        "no token verified at position {position} (best candidate {best_token}, distance {best_distance:e})"
    )]
    NoVerifiedToken {
        position: usize,
        best_token: usize,
        best_distance: f64,
        partial: Box<RecoveryResult>,
    },

    #[error("tokens {tokens:?} all verified at position {position} with epsilon {epsilon:e}")]
    Ambiguous {
        position: usize,
        tokens: Vec<usize>,
        epsilon: f64,
        partial: Box<RecoveryResult>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
