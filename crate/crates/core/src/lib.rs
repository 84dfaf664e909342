//! Gibbs samplers for the cumulative probit model and tools for measuring
//! how their one-step kernels behave as the sample size grows.

// Index loops mirror the formulas in numeric code, and negated comparisons
// in preconditions deliberately reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod error;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod quadrature;
pub mod rng;
pub mod sampling;
pub mod special;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
