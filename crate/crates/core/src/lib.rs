//! Planning over learned latent subgoals with finite-horizon goal-conditioned
//! policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense networks, exact gradients and first-order optimizers.
//! - [`env`]: the 2D navigation room with a U-shaped wall.
//! - [`tdm`]: finite-horizon goal-conditioned actor-critic with hindsight relabeling.
//! - [`vae`]: Gaussian VAE over valid states.
//! - [`planner`]: feasibility-vector objective, CEM and gradient optimizers,
//!   receding-horizon execution.
//! - [`harness`]: configuration, experiments, metrics and ablations.

pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod par;
pub mod planner;
pub mod tdm;
pub mod vae;

pub use error::{Error, Result};
