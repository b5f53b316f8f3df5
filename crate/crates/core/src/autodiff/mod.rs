//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitive applications in topological order; leaves
//! are named inputs and parameters bound per evaluation through [`Bindings`].
//! Subgradient conventions: `relu'(0) = 0`, `|x|'(0) = 0`, max-pool routes the
//! gradient to the first maximal row.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod ops;
pub mod rotation;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport, GRAD_FLOOR, Gradients};
pub use graph::{Bindings, Graph, NodeId, Values};
pub use ops::{Op, SvdPart};
pub use tensor::Tensor;

/// Default `ε` added to the standard deviation in context normalization.
pub const CONTEXT_NORM_EPS: f64 = 1e-6;
