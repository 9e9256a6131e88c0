//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values are row-major [`Tensor`]s in `f32` for training and `f64` for
//! gradient checking. Primitives are recorded on a [`Graph`] as they are
//! evaluated; [`Graph::backward`] replays the record in reverse.

mod catalog;
mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod param;
mod real;
mod tensor;

pub use catalog::{diff_primitive_set, Primitive};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::{numel, Tensor};
