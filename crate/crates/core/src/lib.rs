//! Sieve maximum weighted likelihood for interval-censored failure times
//! under (generalized) case-cohort sampling: a monotone Bernstein polynomial
//! for the cumulative baseline hazard, a ReLU network for the covariate
//! effect, and the simulation, evaluation and attribution tooling around it.

pub mod error;
pub mod grad;
pub mod harness;
pub mod likelihood;
pub mod metrics;
pub mod design;
pub mod shapley;
pub mod simulate;
pub mod streams;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
