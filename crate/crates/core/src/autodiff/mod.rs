//! Dense-matrix reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major `f64` matrix. A [`Graph`] records a forward
//! pass over tensors and propagates gradients back to its leaves. Every value
//! stored on the tape is checked for finiteness as it is recorded.

mod grad_check;
mod graph;
mod tensor;

pub use grad_check::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use graph::{Graph, Var, DEGENERATE_NORM};
pub use tensor::Tensor;
