//! Posterior sampling of radio maps from sparse noisy measurements with diffusion priors.

pub mod baselines;
pub mod checks;
pub mod config;
pub mod error;
pub mod export;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod observation;
pub mod oracle;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod scene_sim;
pub mod schedule;
pub mod sweep;

pub use error::{Error, Result};
pub use grid::{Grid, GridMap};
