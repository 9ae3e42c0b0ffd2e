//! Continuous-time three-qubit bit-flip code under noise-assisted measurement feedback.
//!
//! The crate is organised bottom-up:
//!
//! * [`algebra`]: the 8×8 complex kernel, code operators and state repair.
//! * [`model`]: Itō stochastic master equation steppers for the measured register.
//! * [`controller`]: hysteresis feedback law producing the noise gains.
//! * [`filters`]: full density-matrix filter and the reduced syndrome filter.
//! * [`lyapunov`]: Lyapunov functions, rate estimates and Monte Carlo generator checks.
//! * [`experiments`]: reproducible Monte Carlo ensembles and their CSV/JSON output.
//! * [`config`]: JSON experiment configuration with validation and overrides.
//! * [`verify`]: the desk-scale invariant suite behind `qec-sim verify`.

pub mod algebra;
pub mod config;
pub mod controller;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod lyapunov;
pub mod model;
pub mod verify;

pub use algebra::{build_operators, populations, renormalize, ComplexMatrix8, DensityMatrix, OperatorSet, Populations};
pub use error::SimError;
