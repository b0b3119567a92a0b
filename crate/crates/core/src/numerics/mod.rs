//! Dense tensors, a define-by-run autodiff tape, finite-difference gradient
//! checking and the binary parameter file format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Module, Param, Real, Tensor};
