//! Minimal reverse-mode autodiff over dense `f64` arrays.
//!
//! [`Tensor`] is a plain value. A [`Graph`] records operations on tensors and
//! replays them backwards. Training builds a fresh graph for every step.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;

pub use array::Tensor;
pub use gradcheck::{finite_diff_check, finite_diff_check_at, relative_error, GradCheckReport, GRAD_FLOOR};
pub use graph::{FeatureBox, Graph, Var};

pub(crate) use graph::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("finite-difference check: function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
}
