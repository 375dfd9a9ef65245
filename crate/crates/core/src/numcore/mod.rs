//! Deterministic `f64` tensor algebra with reverse-mode differentiation,
//! SGD with momentum and a binary checkpoint format.

pub mod checkpoint;
pub mod ops;
mod optim;
mod tape;
mod tensor;

use thiserror::Error;

pub use optim::{GradMap, ParamEntry, ParamSet, Sgd};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} has a zero dimension")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: value at index {index} is not 0 or 1")]
    NotBinary { op: &'static str, index: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is not connected to any trainable leaf")]
    DetachedLoss,
    #[error("duplicate parameter {name:?}")]
    DuplicateParam { name: String },
    #[error("gradient for unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("invalid optimizer settings lr={lr} momentum={momentum}")]
    InvalidHyper { lr: f64, momentum: f64 },
}
