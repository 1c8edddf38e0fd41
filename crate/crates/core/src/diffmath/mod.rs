//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation as a node in a Wengert list; [`Value`]
//! is a cheap handle into that list. Calling [`Tape::backward`] on a scalar
//! value walks the list in reverse and accumulates gradients into every
//! reachable node that requires them.
//!
//! Numerical guards: division, `log`, `sqrt`, and L2 norms are guarded with
//! [`GUARD_EPS`] so that gradients stay finite on their domain boundaries.
//! The guard is part of the forward definition, so finite-difference checks
//! of the guarded forward agree with the analytic backward pass.

mod adam;
pub mod fd;
mod ops;
mod tape;
mod value;

pub use adam::{Adam, AdamState};
pub use tape::{Tape, TapeMark};
pub use value::Value;

/// Additive guard used by `div`, `log`, `sqrt`, and L2 norms.
pub const GUARD_EPS: f64 = 1e-12;

/// Scalar softplus, identical to the tape op's forward rule.
pub fn softplus_scalar(x: f64) -> f64 {
    ops::softplus(x)
}

/// Scalar logistic sigmoid, identical to the tape op's forward rule.
pub fn sigmoid_scalar(x: f64) -> f64 {
    ops::sigmoid(x)
}
