//! Minimal reverse-mode autodiff over dense 2-D `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every forward pass. Trainable weights live in a
//! [`ParamSet`] outside the graph and are bound as leaves with
//! [`ParamSet::bind`]; after [`Graph::backward`] the per-parameter gradients
//! are collected with [`Bound::grads`].

mod gradcheck;
mod graph;
mod optim;
mod params;
mod value;

pub use gradcheck::{compare_gradients, finite_difference, grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Gradients, Graph, OpKind, Var, LN_EPS};
pub use optim::{adamw_step, cosine_lr, AdamConfig, AdamState, AdamW};
pub use params::{Bound, ParamId, ParamSet};
pub(crate) use params::hex_string;
pub use value::{matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("unsupported op `{0}`")]
    Unsupported(String),
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{0}: non-finite value produced")]
    NonFinite(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn shape2(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Self {
        TensorError::Shape { op, detail: format!("{a:?} vs {b:?}") }
    }

    pub(crate) fn shape1(op: &'static str, a: (usize, usize)) -> Self {
        TensorError::Shape { op, detail: format!("{a:?}") }
    }
}
