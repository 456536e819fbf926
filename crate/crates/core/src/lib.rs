//! Fully online meta-learning without task boundaries.
//!
//! The crate is `no_std` (with `alloc`): a tape-based reverse-mode
//! differentiation engine that supports differentiating through explicit
//! gradient steps, the network architectures, boundary-free task streams with
//! a replay buffer, the online learners, and the evaluation metrics. File
//! formats, configuration and the command line live in the `foml` crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod harness;
pub mod learners;
pub mod math;
pub mod models;
pub mod optim;
pub mod params;
pub mod streams;
pub mod tensor;

pub use autodiff::{AutodiffError, Tape, Var};
pub use params::{ParameterVector, Segment};
pub use tensor::Tensor;
