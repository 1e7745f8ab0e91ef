//! Dense matrices, seeded randomness, and reverse-mode differentiation.

mod checkpoint;
mod gradcheck;
mod graph;
mod matrix;
mod rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{finite_diff_grad, grad_close, grad_rel_error};
pub use graph::{Gradients, Graph, Var};
pub use matrix::{elementwise, leaky_relu, matmul, sigmoid, ElementwiseOp, Matrix};
pub use rng::Rng;
