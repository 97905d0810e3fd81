//! Simulation and verification toolkit for the supercooled Stefan problem
//! driven by Brownian transport noise.
//!
//! The freezing front is represented through a conditional McKean–Vlasov
//! problem: heat particles diffuse under an idiosyncratic and a common
//! Brownian motion, are absorbed when they reach the front, and every unit
//! of absorbed supercooling mass advances the front by `1/(lambda*kappa)`.
//!
//! Modules:
//! - [`params`]: physical constants and their reduced form `(rho, sigma, alpha)`.
//! - [`profile`]: piecewise-constant initial supercooling densities.
//! - [`cascade`]: physical jump sizes and the vanishing external heat cascade.
//! - [`particle`]: the interacting particle engine with common noise.
//! - [`picard`]: the fixed-point map on front paths and its minimal solution.
//! - [`diagnostics`]: conservation, weak-form and regime checks on trajectories.

pub mod cascade;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod params;
pub mod particle;
pub mod picard;
pub mod profile;
pub mod rng;
pub mod stats;
pub mod testfn;

pub use cascade::{EmpiricalMass, MassFunction, ProfileMass};
pub use error::{Error, Result};
pub use params::{PhysicalParams, ReducedParams};
pub use particle::{ParticleState, SimConfig, Trajectory};
pub use picard::FrontPath;
pub use profile::SupercoolingProfile;
pub use rng::{CounterRng, NoisePath};
