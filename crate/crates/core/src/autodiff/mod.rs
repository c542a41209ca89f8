//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every minibatch. Parameters live in a
//! [`ParamStore`] outside the tape; [`Tape::param`] records a copy of the
//! current value and [`Gradients::accumulate_into`] routes the reverse pass
//! back into the store, where [`Adam`] consumes it.
//!
//! Broadcasting is deliberately narrow: the right operand of a binary op
//! must match the left operand's shape, a suffix of it, or be a scalar.

mod optim;
mod params;
mod tape;
mod tensor;


use thiserror::Error;

pub use optim::{adam_update, Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, softplus, Gradients, Tape, UnaryKind, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("{op}: {detail}")]
    Domain { op: String, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape has already been consumed by backward")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    UnknownVar,
}
