//! Trains small image classifiers with and without adversarial defenses,
//! reads them as energy-based models to map likelihood landscapes around
//! samples, quantifies landscape flatness, and implements the
//! weighted-Jacobian regularizer with its random-projection estimator and
//! proved upper bound.

pub mod attacks;
pub mod data;
pub mod ebm;
pub mod error;
pub mod fsutil;
pub mod landscape;
pub mod models;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Version stamped into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;
