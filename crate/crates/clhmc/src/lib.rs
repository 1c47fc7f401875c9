//! Non-Gaussian ensemble data assimilation built around sampling filters.
//!
//! The analysis step of a sampling filter draws an analysis ensemble directly
//! from the Bayesian posterior with Hamiltonian Monte Carlo. Three variants
//! are provided, together with a deterministic EnKF baseline and a
//! quasi-geostrophic testbed:
//!
//! - **HMC filter** — Gaussian prior built from the forecast ensemble moments.
//! - **ClHMC filter** — the prior is a Gaussian mixture fitted to the forecast
//!   ensemble by EM with AIC/BIC model selection; a single chain samples the
//!   mixture posterior.
//! - **MC-ClHMC filter** — one chain per mixture component, all targeting the
//!   same mixture posterior, so every probability mode is visited.
//! - **DEnKF** — deterministic ensemble Kalman filter with Gaspari-Cohn
//!   localization and multiplicative inflation.
//!
//! See the `examples/` directory for runnable demonstrations of each
//! capability, and the `harness` module for the twin-experiment driver behind
//! the `clhmc` command-line tool.

pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod filters;
pub mod gmm;
pub mod harness;
pub mod hmc;
pub mod potentials;
pub mod qg;
pub mod rng;

pub use error::{Error, Result};
