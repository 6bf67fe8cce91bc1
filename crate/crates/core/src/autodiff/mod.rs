//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records a fixed vocabulary of primitives. Inputs are declared
//! by name (data or trainable), bound at [`Graph::forward`] time, and
//! [`Graph::backward`] returns the adjoint of a scalar loss for every
//! trainable input. The same graph can be re-executed with new bindings,
//! which is how the trainer reuses one graph per batch shape.

pub mod check;
mod graph;
mod tensor;

pub use check::{fd_gradient, GradCheck};
pub use graph::{Bindings, Gradients, Graph, NodeId, Unary, Values};
pub use tensor::Tensor;
