//! A desk-scale laboratory for studying how physics-based stress-equilibrium
//! regularization affects the run-to-run variability of a conditional
//! stress-field predictor.
//!
//! The crate generates synthetic two-phase elasticity datasets with a
//! spectral homogenization solver, trains a small conditional GAN under four
//! different objectives, runs many independently seeded training sessions,
//! and analyzes the spread of the resulting error metrics with bootstrap
//! resampling.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod field;
pub mod losses;
pub mod nn;
pub mod trainer;
pub mod variability;

pub use error::{Error, Result};
