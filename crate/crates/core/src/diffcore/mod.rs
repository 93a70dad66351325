//! Reverse-mode differentiable evaluation and a first-order optimizer.
//!
//! All fitting runs in 64-bit floats on a single thread; identical seeds
//! and inputs produce bit-identical forward values and gradients.

mod check;
mod params;
mod tape;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use check::{finite_diff_check, LossBuilder, REL_FLOOR};
pub use params::{AdamParams, Param, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

/// Gradient of the loss with respect to each learnable parameter.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("loss node is not scalar (shape {shape:?})")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("gradient shape mismatch for '{name}': expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("normalize of near-zero tensor (norm {norm})")]
    DegenerateNormalize { norm: f64 },
}
