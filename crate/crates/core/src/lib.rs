//! Model-based estimation of classifier performance metrics on small
//! subpopulations.

pub mod checking;
pub mod dataset;
pub mod error;
pub mod formula;
pub mod inference;
pub mod metrics;
pub mod predictive;
pub mod resample;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
