//! Confidence-calibrated classification of weakly labeled biopsy cores.
//!
//! The library covers the full pipeline: synthetic dataset generation with
//! controllable label noise ([`synthgen`]), RF-image patch extraction
//! ([`preprocess`]), a small trainable CNN backbone ([`model`]), an evidential
//! classification head with closed-form risk loss ([`edl`]), a dual-network
//! co-teaching trainer robust to label noise ([`coteach`]), baseline
//! uncertainty methods ([`baselines`]), and selective-prediction evaluation
//! with calibration metrics ([`eval`]).

pub mod baselines;
pub mod coteach;
pub mod domain;
pub mod edl;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod preprocess;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
