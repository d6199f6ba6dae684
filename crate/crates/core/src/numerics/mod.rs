//! Numeric foundation: tensors, seeded RNG, compute kernels and the
//! reverse-mode autodiff graph built on top of them.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, VarId};
pub use rng::{seeded_rng, Rng};
pub use tensor::Tensor;
