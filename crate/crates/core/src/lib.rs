//! Learned moment closures for the linear semiconductor Boltzmann equation.
//!
//! The crate covers the whole pipeline: discrete-velocity kinetic reference
//! solves, Hermite moment extraction, stochastic Galerkin treatment of random
//! inputs, neural gradient closures with an optional hyperbolicity-preserving
//! output head, and a WENO5 / SSP-RK3 solver for the closed moment systems.

pub mod closure;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gpc;
pub mod hermite;
pub mod hyperbolicity;
pub mod kinetic;
pub mod mlp;
pub mod moment_system;
pub mod quadrature;
pub mod sigma;
pub mod snapshots;

pub use error::{Error, Result};
