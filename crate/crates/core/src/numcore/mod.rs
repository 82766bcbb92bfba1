//! Numeric core: tensors, reverse-mode autodiff, deterministic RNG and
//! optimizers.

mod gradcheck;
mod graph;
mod optim;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi};
pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerKind, OptimizerState};
pub use rng::Rng;
pub use tensor::Tensor;
