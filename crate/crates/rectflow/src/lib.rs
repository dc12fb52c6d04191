//! Injective (rectangular) normalizing flows trained by maximum likelihood.
//!
//! A rectangular flow models data that lives near a d-dimensional manifold
//! embedded in R^D. It composes a d-dimensional bijective flow, a fixed
//! zero-padding embedding, and a D-dimensional bijective flow; densities on
//! the learned manifold carry an injective change-of-variable correction,
//! the log-determinant of the Jacobian Gram matrix J^T J. This crate
//! provides:
//!
//! * a small tape-based autodiff engine with forward (dual-number) and
//!   reverse modes that can be nested one inside the other
//!   ([`autodiff`]);
//! * RealNVP-style coupling flows with exact inverses ([`flows`]) and the
//!   rectangular composition ([`rectangular`]);
//! * exact and matrix-free stochastic estimators for the volume-change term
//!   and its parameter gradient, with conjugate gradients, Hutchinson trace
//!   probes, and instrumented cost counters ([`estimators`]);
//! * maximum-likelihood training with likelihood annealing, plus the
//!   alternating reconstruction/likelihood baseline ([`training`]);
//! * evaluation metrics: Gaussian-moment transport distance, a decision
//!   stump for out-of-distribution scoring, per-point log-likelihoods
//!   ([`metrics`]);
//! * dataset synthesis and tabular CSV loading ([`data`]), and a config /
//!   checkpoint / subcommand layer ([`cli`]).
//!
//! Start with the runnable examples in `examples/` for end-to-end usage.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod flows;
pub mod linalg;
pub mod metrics;
pub mod rectangular;
pub mod training;

#[cfg(test)]
pub(crate) mod testkit;

pub use error::{Error, Result};
