//! Dense tensors, reverse-mode autodiff, gradient checking and optimizers.
//!
//! Values are stored and accumulated in `f64`; every reduction runs in a
//! fixed order, so repeated runs are bit-identical.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, GradCheckConfig, GradCheckReport, Stencil, REL_ERR_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimConfig, OptimState, OptimizerKind};
pub use tensor::Tensor;
