//! Reconstruction and forecasting of daily reproductive hormone series from a
//! small budget of irregular measurements.
//!
//! The pipeline has three stages:
//!
//! * [`mgp`] fits a per-individual multi-task Gaussian process with a
//!   Kronecker-structured (coregionalization x periodic) covariance and
//!   produces a posterior over the daily grid.
//! * [`dcnn`] trains a population-level non-causal dilated convolutional
//!   network on sample streams drawn from those posteriors.
//! * [`sampling`] chooses measurement days, either at random or greedily via
//!   the closed-form Expected Distance acquisition.
//!
//! [`datagen`] produces synthetic cohorts and [`eval`] wires everything into
//! reproducible experiments with MSE tables.

pub mod datagen;
pub mod dcnn;
pub mod error;
pub mod eval;
pub mod hormone;
pub mod linalg;
pub mod mgp;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use hormone::{HormoneId, NUM_HORMONES, OBSERVATION_WINDOW, SERIES_DAYS};
