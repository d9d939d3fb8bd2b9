//! geofair: a desk-scale pipeline for auditing urban/rural fairness of
//! satellite-feature poverty maps.
//!
//! The library covers the full loop: synthetic country generation
//! ([`synth`]), random convolutional featurization ([`featurize`]),
//! ridge modeling with cross-validation ([`model`]), disparity and
//! driver metrics ([`audit`]), targeting simulations and recalibration
//! ([`policy`]), geographic preprocessing ([`geoprep`]), and a seeded
//! repeated-experiment runner ([`experiment`]).

pub mod audit;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod featurize;
pub mod geoprep;
pub mod model;
pub mod policy;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
