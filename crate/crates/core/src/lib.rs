//! Fluid simulation of a signalized artery with event-driven perturbation
//! analysis of the GREEN-cycle lengths.
//!
//! * [`model`]: geometry, parameters and local transition rules.
//! * [`engine`]: the event-driven simulator and its metrics.
//! * [`ipa`]: derivative replay over the recorded events.
//! * [`optimizer`]: batch and online gradient descent.
//! * [`fd`]: finite-difference gradients with common random numbers.
//! * [`scenario`], [`experiment`]: configuration files and CLI experiments.

pub mod arrival;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod fd;
pub mod ipa;
pub mod model;
pub mod optimizer;
pub mod parallel;
pub mod scenario;
pub mod sparse;

pub use error::{Error, Result};
