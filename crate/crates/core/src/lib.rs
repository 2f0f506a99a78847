//! Normalized inductive conformal prediction for regression, with per-sample
//! scales from deep regression forests, Monte Carlo dropout, or a residual
//! random forest.

pub mod conformal;
pub mod dataset;
pub mod drf;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod rf;

pub use error::{Error, Result};
