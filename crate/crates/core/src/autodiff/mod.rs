//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::{logsumexp_iter, matmul_raw, sigmoid, Op};
pub use params::{ParamGrads, ParamId, ParamStore};
