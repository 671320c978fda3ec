//! Dense float64 tensors with reverse-mode gradients, Adam, finite-difference
//! checks and a binary checkpoint format.

mod checkpoint;
mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_many};
pub use matrix::Matrix;
pub use param::{adam_step, Adam, ParamId, ParamStore, Parameter};
pub use tape::{row_softmax, Primitive, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be 1x1, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("loss does not depend on any trainable input")]
    DetachedLoss,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
