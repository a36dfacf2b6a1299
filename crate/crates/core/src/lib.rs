//! Stochastic parabolic–hyperbolic free-boundary tumour model on the fixed domain rho in [0, 1]:
//! forward simulation, pathwise adjoint and box-constrained optimal control.

pub mod adjoint;
pub mod config;
pub mod control;
pub mod error;
pub mod export;
pub mod forward;
pub mod grid;
pub mod noise;
pub mod rates;

pub use error::{Error, Result};
