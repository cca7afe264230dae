//! Low-rank approximation of posterior covariances for linear-Gaussian
//! inverse problems governed by time-dependent PDEs.
//!
//! The pipeline is: [`discretize`] builds spatial operators, [`forward`]
//! solves the all-at-once implicit-Euler space-time system on low-rank
//! fields ([`lowrank`]), [`hessian`] applies the prior-preconditioned
//! data-misfit Hessian matrix-free, [`arnoldi`] extracts its dominant
//! eigenpairs, and [`posterior`] turns those into a low-rank update of the
//! prior covariance. [`oracle`] is a dense brute-force reference used to
//! validate everything at small scale.

pub mod arnoldi;
pub mod banded;
pub mod discretize;
mod error;
pub mod forward;
pub mod hessian;
pub mod lowrank;
pub mod oracle;
pub mod posterior;

pub use error::{Error, Result};
