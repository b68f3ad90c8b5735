//! Numerical laboratory for Generator-Verifier-Updater (GVU) self-improvement
//! dynamics.
//!
//! Everything here lives on a finite *battery*: a handful of tasks, each with an
//! enumerated output set and an explicit score table. Policies are tabular
//! softmax distributions in a reduced-logit chart, so the capability `F(θ)`,
//! its gradient, the score function and the Fisher information are all
//! computable exactly by enumeration. That exactness is what the Monte Carlo
//! estimators in [`gvu`], [`diagnostics`] and [`kappa`] are checked against.
//!
//! Module map:
//!
//! - [`battery`]: tasks, score tables, sampling law, capability `F`.
//! - [`manifold`]: parameters, score function, Fisher metric, natural gradient.
//! - [`gvu`]: generator, the verifier potential zoo, argmin / REINFORCE updaters.
//! - [`diagnostics`]: update decomposition, Variance Inequality, slop mass.
//! - [`representation`]: implied potentials of arbitrary first-order fields.
//! - [`kappa`]: budgeted trajectories and the empirical self-improvement rate.
//! - [`rng`]: counter-based hierarchical random streams.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod battery;
pub mod diagnostics;
mod error;
pub mod gvu;
pub mod kappa;
pub mod manifold;
pub mod representation;
pub mod rng;
pub mod stats;

pub use battery::{Battery, BatteryDescription, Interaction, TaskSpec};
pub use error::{Error, Result};
pub use gvu::{UpdaterSpec, VerifierKind, VerifierSpec};
pub use manifold::{FisherMatrix, TangentVector, Theta};
pub use rng::Stream;
