//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Second and higher derivatives come from differentiating a recorded
//! backward pass: [`Graph::grad`] appends the gradient computation to the
//! graph as ordinary nodes, so a scalar built from those gradients can be
//! passed to [`Graph::backward`] again.

mod backward;
pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use backward::GradientMap;
pub use graph::{Graph, Var};
pub use ops::Op;
pub use tensor::Tensor;
