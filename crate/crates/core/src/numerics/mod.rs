//! Dense tensors, reverse-mode autodiff and the AdamW optimizer.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use tensor::{Precision, Scalar, Tensor};

#[cfg(test)]
mod tests;
