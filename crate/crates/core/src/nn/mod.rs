//! Minimal tensor core: batched kernels, a reverse-mode tape, named
//! parameters with Adam, and a checkpoint archive.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{decode_checkpoint, encode_checkpoint, write_atomic, Adam, Bound, ParameterSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
