//! Dense row-major `f64` tensors with a define-by-run reverse-mode tape.
//!
//! Every differentiable primitive records its inputs and whatever activations
//! its backward rule needs on a [`Tape`]. [`Tape::backward`] walks the tape in
//! reverse exactly once and returns gradients for every trainable parameter
//! and every gradient-carrying input leaf.
//!
//! Values are checked after each primitive: a NaN or infinity anywhere is an
//! error, not a silent propagation.

mod error;
mod gemm;
mod param;
mod sample;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_coords, primitive_suite, PrimitiveCheck};
pub use param::{ParamStore, Parameter};
pub use sample::{bilinear_taps, SamplePlan, SamplePlanBuilder};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Layer normalization epsilon.
pub const LN_EPS: f64 = 1e-5;
