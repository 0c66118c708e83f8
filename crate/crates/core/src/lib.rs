//! Constrained model predictive control with composite NUV priors and
//! iterated Kalman smoothing.

// `!(v > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod priors;
pub mod scalar_lab;

pub use error::{Error, Result};
pub mod lssm;
mod serde_la;
pub mod mbf;
pub mod oracle;
pub mod iake;
pub mod scenarios;
