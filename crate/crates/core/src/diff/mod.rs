//! Tensors, reverse-mode autodiff and the Adam optimiser.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, gradcheck_with, relative_error, GradcheckReport};
pub use graph::{leaky_relu, leaky_relu_grad, sigmoid, softplus, Graph, OpKind, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
