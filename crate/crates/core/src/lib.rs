//! Small-noise rough differential equations driven by fractional Brownian
//! motion: path sampling, rough-path lifts, a Davie-type solver, the
//! deviation skeleton with its Gaussian limit, and Monte Carlo checks of the
//! central-limit and moderate-deviation regimes.

pub mod cli;
pub mod coeff;
pub mod error;
pub mod fbm;
pub mod grid;
pub mod mdp;
pub mod rde;
pub mod rng;
pub mod roughpath;
pub mod skeleton;

pub use error::{Error, Result};
