//! Numerical laboratory for large deviations of Birkhoff averages over
//! non-uniformly expanding maps.
//!
//! The crate measures hyperbolic times, dynamical-ball masses and weak-Gibbs
//! constants, separated sets and Katok entropy, deviation-set probabilities
//! and their exponential rates, and specification gaps, on four example
//! families: quadratic maps, the Manneville–Pomeau map, perturbed expanding
//! circle maps, and Viana maps.

pub mod deviation;
pub mod dynamics;
pub mod error;
pub mod gibbs;
pub mod hyperbolic;
pub mod interval;
pub mod metric;
pub mod parallel;
pub mod rng;
pub mod sampler;
pub mod spec_probe;
pub mod stats;
pub mod zoo;

#[cfg(feature = "cli")]
pub mod cli;
#[cfg(feature = "cli")]
pub mod config;
#[cfg(feature = "cli")]
pub mod report;
#[cfg(feature = "cli")]
pub mod run;

pub use dynamics::{Domain, MapSystem, Observable, Point, PotentialModel};
pub use error::{Error, Result};
pub use hyperbolic::HyperbolicParams;
pub use sampler::Sampler;
pub use zoo::FamilyParams;
