//! Byte-level encoder-decoder transformers with a learned token-deletion gate.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors, a reverse-mode tape, `softmax₁`.
//! * [`model`]: the T5-style encoder-decoder, the delete gate, soft and hard deletion.
//! * [`control`]: regularisers, the PI controller for the deletion ratio, AdamW and the training loop.
//! * [`data`]: byte vocabulary, diagnostic task generators and span corruption.
//! * [`baselines`]: alternative sequence reducers.
//! * [`analysis`]: MAC counts, evaluation, correlation.

pub mod analysis;
pub mod baselines;
pub mod control;
pub mod data;
pub mod model;
pub mod numerics;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
