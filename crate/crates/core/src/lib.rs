//! Multifidelity linear regression.
//!
//! Control-variate estimators of the regression cross-moment `C_XY = E[x(Z) f(Z)]`
//! and coefficients `β = C_XX^{-1} C_XY` that mix a few high-fidelity model
//! evaluations with many cheap low-fidelity ones.

// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod coefficients;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod features;
pub mod linalg;
pub mod models;
pub mod statistics;

pub use error::{Error, ErrorClass, Result};
