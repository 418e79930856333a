//! Weight-decomposed low-rank adapters (DoRA) trained by bi-level
//! optimization: magnitudes on a validation split, directions on a training
//! split, coupled through a one-step-unrolled hypergradient.

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod bilevel;
pub mod error;
pub mod harness;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
