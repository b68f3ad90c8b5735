//! Implied potentials of first-order update fields.
//!
//! Any tangent field `v` at a regular point is the expected REINFORCE update
//! of the potential `V(x, y) = ⟨G⁻¹ v, s_θ(x, y)⟩`, because
//! `E[V s] = G G⁻¹ v = v`. Everything here is exact enumeration over the
//! battery; potential tables are laid out in interaction order (task-major,
//! output-minor).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::Battery;
use crate::gvu::{generate_with, reinforce_with};
use crate::manifold::{fisher_exact, natural_gradient, Policy, TangentVector, Theta};
use crate::rng::Stream;
use crate::stats::Estimate;
use crate::{Error, Result};

pub const DEFAULT_DAMPING: f64 = 1e-10;
pub const MIN_PROBE_REPLICAS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub theta: Theta,
    pub v: TangentVector,
}

/// `V(x, y) = ⟨a, s_θ(x, y)⟩` with `(G + damping I) a = v`, for every
/// interaction of the battery.
pub fn implied_potential(
    b: &Battery,
    theta: &Theta,
    v: &TangentVector,
    damping: f64,
) -> Result<Vec<f64>> {
    let g = fisher_exact(b, theta)?;
    let a = natural_gradient(&g, v, damping)?;
    let policy = Policy::new(b, theta)?;
    let mut table = Vec::with_capacity(b.num_interactions());
    for t in 0..b.num_tasks() {
        let p = policy.probs(t);
        let block = a.block(t);
        // ⟨a, e_y − π⟩ restricted to the reduced coordinates.
        let mean: f64 = block.iter().zip(&p[1..]).map(|(ak, pk)| ak * pk).sum();
        table.push(-mean);
        table.extend(block.iter().map(|ak| ak - mean));
    }
    Ok(table)
}

/// `E_{μ⊗π_θ}[V(x, y) s_θ(x, y)]` by enumeration.
pub fn reconstruct_field(b: &Battery, theta: &Theta, table: &[f64]) -> Result<TangentVector> {
    if table.len() != b.num_interactions() {
        return Err(Error::ShapeMismatch(format!(
            "potential table has {} entries, battery has {} interactions",
            table.len(),
            b.num_interactions()
        )));
    }
    let policy = Policy::new(b, theta)?;
    let mut field = theta.zero_tangent();
    for (i, &v) in b.interactions().zip(table) {
        let w = b.weights()[i.task] * policy.prob(i) * v;
        if w != 0.0 {
            policy.add_score(&mut field, i, w);
        }
    }
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NecessityReport {
    /// `‖mean ĝ‖` over replicas.
    pub mean_norm: f64,
    /// `sqrt(tr Cov(ĝ) / replicas)`, the standard error of the mean along a
    /// typical direction.
    pub stderr: f64,
    pub replicas: u64,
}

/// Monte Carlo mean of the REINFORCE estimator under the constant potential
/// `const_value`.
pub fn necessity_probe(
    b: &Battery,
    theta: &Theta,
    const_value: f64,
    n: usize,
    replicas: usize,
    rng: &mut Stream,
) -> Result<NecessityReport> {
    if replicas < MIN_PROBE_REPLICAS {
        return Err(Error::InvalidArgument(format!(
            "necessity_probe needs at least {MIN_PROBE_REPLICAS} replicas, got {replicas}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if !const_value.is_finite() {
        return Err(Error::InvalidArgument("const_value must be finite".into()));
    }
    let policy = Policy::new(b, theta)?;
    use rand::RngCore;
    let label = rng.next_u64();
    let base = rng.child(label);
    let potentials = vec![const_value; n];
    let updates: Vec<TangentVector> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let batch = generate_with(b, &policy, n, &mut base.child(r));
            reinforce_with(&policy, theta, &batch, &potentials)
        })
        .collect();
    let d = theta.dim();
    let mut mean_norm2 = 0.0;
    let mut trace = 0.0;
    for k in 0..d {
        let coords: Vec<f64> = updates.iter().map(|u| u.as_slice()[k]).collect();
        let e = Estimate::from_samples(&coords);
        mean_norm2 += e.mean * e.mean;
        trace += e.stderr * e.stderr;
    }
    Ok(NecessityReport {
        mean_norm: mean_norm2.sqrt(),
        stderr: trace.sqrt(),
        replicas: replicas as u64,
    })
}
