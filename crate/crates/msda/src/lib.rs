//! Reduced-order stochastic filters for multiscale systems with model error.
//!
//! The crate covers the linear two-scale theory (steady Riccati solutions, optimal
//! reduced parameters, joint error statistics), Gaussian-closure moment filters for a
//! stochastically forced complex mode, an adaptive ensemble transform Kalman filter with
//! online noise estimation on two-layer Lorenz-96, and the offline regression baseline.

// `!(x > 0.0)` is the NaN-rejecting form used throughout parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod enkf;
pub mod error;
pub mod linalg;
pub mod linear_theory;
pub mod models;
pub mod offline_fit;
pub mod rng;
pub mod spekf_filters;

pub use error::{Error, Result};
