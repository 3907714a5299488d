//! Dense tensors and a re-entrant reverse-mode differentiation graph.
//!
//! A [`Graph`] is built for one forward/backward computation and then
//! dropped. All values are `f64`.

mod fd;
mod graph;
mod ops;
mod tensor;

pub use fd::finite_diff_check;
pub use graph::{Graph, Var};
pub use ops::{logistic, softplus_unit, OpKind};
pub use tensor::Tensor;
