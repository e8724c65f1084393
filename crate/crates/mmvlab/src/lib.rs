//! Simulation and verification laboratory for robust (monotone mean-variance)
//! stochastic control with random coefficients.
//!
//! The crate solves the two backward SDEs behind the saddle point of
//!
//! ```text
//! sup_u inf_eta  E^{P^eta}[ X_T^u + (Lambda_T^eta - 1) / (2 theta) ],
//! ```
//!
//! builds the optimal pair (eta_hat, u_hat), verifies the saddle property by
//! Monte Carlo, reproduces the mean-variance duality chain, and runs the
//! portfolio-selection and investment-reinsurance applications.

// numeric kernels index several slices in lockstep; iterator zips would
// obscure the recursions
#![allow(clippy::needless_range_loop)]
// !(x > 0.0) is the NaN-rejecting form of a domain check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affine;
pub mod applications;
pub mod bsde;
pub mod bundle;
pub mod control;
pub mod duality;
pub mod engine;
pub mod error;
pub mod grid;
pub mod model;
pub mod quad;
pub mod regression;
pub mod report;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use model::{validate_scenario, CoefficientModel, JumpModel, ScenarioConfig};
