//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the graph and are copied in as leaves; after
//! [`Graph::backward`] their gradients are read back by handle.

mod graph;
mod params;
mod tensor;

pub use graph::{bce_scalar, Graph, Var, PROB_EPS};
pub(crate) use graph::{sigmoid_scalar, softplus_scalar};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root does not depend on any trainable input")]
    DetachedRoot,
    #[error("backward already ran on this graph; reset gradients first")]
    AlreadyBackpropagated,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
}
