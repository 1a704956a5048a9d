//! Finite-time stabilization of chained-form systems with time-varying
//! feedback built on parametric Lyapunov equations.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ple;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
