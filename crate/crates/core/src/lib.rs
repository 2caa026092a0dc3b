//! Simulation and likelihood-based parameter estimation for systems of
//! weakly interacting hypoelliptic diffusions.
//!
//! State vectors split into a smooth block (no direct noise) and a rough
//! block (directly driven by Brownian motion). The crate provides locally
//! Gaussian one-step transition moments and densities, trajectory
//! simulation, contrast (negative pseudo-log-likelihood) minimization for
//! complete and partial observation regimes, and plug-in asymptotic
//! precision diagnostics.

pub mod asymptotics;
pub mod contrast;
pub mod error;
pub mod lg;
pub mod partial;
pub mod model;
pub mod models;
pub mod params;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use model::{Cloud, Dims, Model, ParamDims, ParticleSystemState};
pub use params::ParameterVector;
