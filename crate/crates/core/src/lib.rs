//! Stochastic-optimization laboratory.
//!
//! SGD and stochastic-approximation iterations driven by biased,
//! unbounded-variance gradient oracles, together with the machinery used to
//! check almost-sure convergence and convergence rates empirically:
//! power-law schedules with analytic summability classifiers, a catalog of
//! test objectives with PL/KL' metadata, oracle constructions (coordinate,
//! block, Kiefer-Wolfowitz, SPSA, minibatch), log-log rate fitting and a
//! simulator for almost-supermartingale processes.

// `!(x <= y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod objectives;
pub mod optimize;
pub mod oracles;
pub mod rng;
pub mod schedules;

pub use error::{Error, Result};

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    norm_sq(v).sqrt()
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
