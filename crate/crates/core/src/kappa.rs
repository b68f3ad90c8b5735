//! Budgeted GVU trajectories and the empirical self-improvement rate.
//!
//! The resource unit is one sampled interaction. Inner iterations of the
//! argmin updater are free. Checkpoints record exact capability, so the only
//! randomness in a trajectory is the GVU flow itself.

use serde::{Deserialize, Serialize};

use crate::battery::{capability_exact, family_capabilities, strict_success_rate, Battery};
use crate::diagnostics::decay_verifier;
use crate::gvu::{gvu_step, UpdaterSpec, VerifierSpec};
use crate::manifold::Theta;
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub budget_total: u64,
    pub consumed: u64,
}

impl BudgetLedger {
    /// Cost of one sampled interaction.
    pub const COST_PER_SAMPLE: u64 = 1;

    pub fn new(budget_total: u64) -> Self {
        Self {
            budget_total,
            consumed: 0,
        }
    }

    pub fn can_afford(&self, samples: u64) -> bool {
        self.consumed + samples * Self::COST_PER_SAMPLE <= self.budget_total
    }

    pub fn charge(&mut self, samples: u64) -> Result<()> {
        if !self.can_afford(samples) {
            return Err(Error::InvalidArgument(format!(
                "charging {samples} samples would exceed the budget of {}",
                self.budget_total
            )));
        }
        self.consumed += samples * Self::COST_PER_SAMPLE;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointFlag {
    /// A step left the logit box; the trajectory stopped here.
    Overflow,
    /// Some argmin step since the previous checkpoint did not converge.
    NonConverged,
}

impl CheckpointFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Overflow => "overflow",
            Self::NonConverged => "non_converged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub consumed: u64,
    pub f: f64,
    pub strict_rate: f64,
    /// Family-conditional capability, aligned with `Trajectory::family_labels`.
    pub family_f: Vec<f64>,
    /// Goodhart alignment state, when the verifier has one.
    pub alignment: Option<f64>,
    pub flags: Vec<CheckpointFlag>,
    pub theta: Theta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub budget_total: u64,
    pub batch_size: u64,
    pub family_labels: Vec<String>,
    pub family_weights: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
}

impl Trajectory {
    pub fn consumed_final(&self) -> u64 {
        self.checkpoints.last().map_or(0, |c| c.consumed)
    }

    pub fn terminated_by_overflow(&self) -> bool {
        self.checkpoints
            .last()
            .is_some_and(|c| c.flags.contains(&CheckpointFlag::Overflow))
    }
}

fn checkpoint(
    b: &Battery,
    theta: &Theta,
    step: u64,
    consumed: u64,
    vspec: &VerifierSpec,
    flags: Vec<CheckpointFlag>,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        step,
        consumed,
        f: capability_exact(b, theta)?,
        strict_rate: strict_success_rate(b, theta)?,
        family_f: family_capabilities(b, theta)?
            .into_iter()
            .map(|f| f.capability)
            .collect(),
        alignment: vspec.alignment(),
        flags,
        theta: theta.clone(),
    })
}

/// Iterates the GVU step until the next batch would exceed `budget`.
///
/// A checkpoint is taken at the start, every `checkpoint_every` steps, and
/// after the last step. A goodhart verifier's alignment decays by
/// `γ ‖Δθ‖` after every step.
#[allow(clippy::too_many_arguments)]
pub fn run_trajectory(
    b: &Battery,
    theta0: &Theta,
    vspec: &VerifierSpec,
    uspec: &UpdaterSpec,
    n: usize,
    budget: u64,
    checkpoint_every: usize,
    rng: &mut Stream,
) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if checkpoint_every == 0 {
        return Err(Error::InvalidArgument(
            "checkpoint_every must be >= 1".into(),
        ));
    }
    vspec.validate()?;
    uspec.validate()?;
    theta0.check_compatible(b)?;
    let families = family_capabilities(b, theta0)?;
    let mut vspec = vspec.clone();
    let mut ledger = BudgetLedger::new(budget);
    let mut theta = theta0.clone();
    let mut checkpoints = vec![checkpoint(b, &theta, 0, 0, &vspec, Vec::new())?];
    let mut pending = Vec::new();
    let mut step = 0u64;
    while ledger.can_afford(n as u64) {
        ledger.charge(n as u64)?;
        step += 1;
        match gvu_step(b, &theta, n, &vspec, uspec, rng) {
            Ok((next, record)) => {
                if !record.converged && !pending.contains(&CheckpointFlag::NonConverged) {
                    pending.push(CheckpointFlag::NonConverged);
                }
                decay_verifier(&mut vspec, record.step_norm);
                theta = next;
            }
            Err(Error::NumericalOverflow { .. }) => {
                pending.push(CheckpointFlag::Overflow);
                checkpoints.push(checkpoint(
                    b,
                    &theta,
                    step,
                    ledger.consumed,
                    &vspec,
                    pending,
                )?);
                return Ok(finish(budget, n, families, checkpoints));
            }
            Err(e) => return Err(e),
        }
        if step.is_multiple_of(checkpoint_every as u64) || !ledger.can_afford(n as u64) {
            let flags = std::mem::take(&mut pending);
            checkpoints.push(checkpoint(b, &theta, step, ledger.consumed, &vspec, flags)?);
        }
    }
    Ok(finish(budget, n, families, checkpoints))
}

fn finish(
    budget: u64,
    n: usize,
    families: Vec<crate::battery::FamilyScore>,
    checkpoints: Vec<Checkpoint>,
) -> Trajectory {
    Trajectory {
        budget_total: budget,
        batch_size: n as u64,
        family_labels: families.iter().map(|f| f.label.clone()).collect(),
        family_weights: families.iter().map(|f| f.weight).collect(),
        checkpoints,
    }
}

/// `(F_final − F_initial) / consumed_final`.
pub fn kappa_hat(traj: &Trajectory) -> Result<f64> {
    let cps = &traj.checkpoints;
    if cps.len() < 2 || traj.consumed_final() == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let (first, last) = (&cps[0], &cps[cps.len() - 1]);
    Ok((last.f - first.f) / (last.consumed - first.consumed) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaPoint {
    /// Midpoint of the window in consumed samples.
    pub consumed: f64,
    /// Samples spanned by the window.
    pub span: u64,
    pub kappa: f64,
}

/// Slopes `ΔF / Δconsumed` across each run of `window` consecutive
/// checkpoints.
pub fn kappa_curve(traj: &Trajectory, window: usize) -> Result<Vec<KappaPoint>> {
    if window < 2 {
        return Err(Error::InvalidArgument(format!(
            "window must be >= 2, got {window}"
        )));
    }
    let cps = &traj.checkpoints;
    if window > cps.len() {
        return Err(Error::WindowTooLarge {
            window,
            checkpoints: cps.len(),
        });
    }
    Ok(cps
        .windows(window)
        .map(|w| {
            let (a, z) = (&w[0], &w[window - 1]);
            let span = z.consumed - a.consumed;
            KappaPoint {
                consumed: 0.5 * (a.consumed + z.consumed) as f64,
                span,
                kappa: (z.f - a.f) / span as f64,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::simple_battery;
    use crate::gvu::VerifierKind;

    fn battery() -> Battery {
        simple_battery(&[vec![0.0, 1.0, 0.4], vec![0.8, 0.1]], &[0.7, 0.3]).unwrap()
    }

    #[test]
    fn ledger_accounting() {
        let mut l = BudgetLedger::new(10);
        assert!(l.can_afford(10));
        l.charge(6).unwrap();
        assert!(!l.can_afford(5));
        assert!(l.charge(5).is_err());
        assert_eq!(l.consumed, 6);
    }

    #[test]
    fn budget_below_batch_gives_initial_checkpoint_only() {
        let b = battery();
        let t = run_trajectory(
            &b,
            &Theta::zeros(&b),
            &VerifierSpec::oracle(),
            &UpdaterSpec::reinforce(0.1),
            32,
            31,
            1,
            &mut Stream::new(0),
        )
        .unwrap();
        assert_eq!(t.checkpoints.len(), 1);
        assert_eq!(t.checkpoints[0].consumed, 0);
        assert_eq!(kappa_hat(&t), Err(Error::EmptyTrajectory));
    }

    #[test]
    fn frozen_updater_is_flat() {
        // The argmin moves θ by O(|∇ nll| / λ), so F drifts by O(1/λ) per step.
        let b = battery();
        for (lambda, tol) in [(1e6, 1e-6), (1e10, 1e-9)] {
            let t = run_trajectory(
                &b,
                &Theta::zeros(&b),
                &VerifierSpec::oracle(),
                &UpdaterSpec::argmin(0.5, lambda, 50, 1e-10),
                16,
                16 * 20,
                3,
                &mut Stream::new(1),
            )
            .unwrap();
            let f0 = t.checkpoints[0].f;
            assert!(t.checkpoints.iter().all(|c| (c.f - f0).abs() <= tol));
            let k = kappa_hat(&t).unwrap();
            assert!(k.abs() <= tol / t.consumed_final() as f64);
            assert!(kappa_curve(&t, 2)
                .unwrap()
                .iter()
                .all(|p| p.kappa.abs() <= tol / 16.0));
        }
    }

    #[test]
    fn budget_law_and_ordering() {
        let b = battery();
        let t = run_trajectory(
            &b,
            &Theta::zeros(&b),
            &VerifierSpec::oracle(),
            &UpdaterSpec::reinforce(0.5),
            7,
            100,
            4,
            &mut Stream::new(2),
        )
        .unwrap();
        let last = t.consumed_final();
        assert!(last <= 100 && 100 - last < 7);
        assert!(t
            .checkpoints
            .windows(2)
            .all(|w| w[0].consumed < w[1].consumed));
        for c in &t.checkpoints {
            let total: f64 = c
                .family_f
                .iter()
                .zip(&t.family_weights)
                .map(|(f, w)| f * w)
                .sum();
            assert!((total - c.f).abs() <= 1e-12);
        }
    }

    #[test]
    fn kappa_arithmetic() {
        let b = battery();
        let mk = |consumed: u64, f: f64| Checkpoint {
            step: 0,
            consumed,
            f,
            strict_rate: 0.0,
            family_f: vec![f],
            alignment: None,
            flags: Vec::new(),
            theta: Theta::zeros(&b),
        };
        let traj = Trajectory {
            budget_total: 1_000_000,
            batch_size: 1,
            family_labels: vec!["default".into()],
            family_weights: vec![1.0],
            checkpoints: vec![mk(0, 0.5), mk(400_000, 0.8), mk(1_000_000, 0.9)],
        };
        assert!((kappa_hat(&traj).unwrap() - 4e-7).abs() < 1e-18);
        let curve = kappa_curve(&traj, 2).unwrap();
        assert_eq!(curve.len(), 2);
        let weighted: f64 = curve.iter().map(|p| p.kappa * p.span as f64).sum::<f64>() / 1e6;
        assert!((weighted - 4e-7).abs() < 1e-9);
        assert_eq!(
            kappa_curve(&traj, 4),
            Err(Error::WindowTooLarge {
                window: 4,
                checkpoints: 3
            })
        );
    }

    #[test]
    fn overflow_terminates_with_flag() {
        let b = simple_battery(&[vec![0.0, 1.0]], &[1.0]).unwrap();
        let t = run_trajectory(
            &b,
            &Theta::zeros(&b),
            &VerifierSpec::new(
                VerifierKind::Constant {
                    value: 1e6,
                    tau: 0.0,
                },
                1.0,
            )
            .unwrap(),
            &UpdaterSpec::reinforce(1.0),
            1,
            1000,
            1,
            &mut Stream::new(3),
        )
        .unwrap();
        assert!(t.terminated_by_overflow());
        assert!(t.consumed_final() < 1000);
    }

    #[test]
    fn goodhart_alignment_decays() {
        let b = battery();
        let spec = VerifierSpec::new(
            VerifierKind::Goodhart {
                gamma: 0.5,
                junk_seed: 1,
                alignment: 1.0,
            },
            1.0,
        )
        .unwrap();
        let t = run_trajectory(
            &b,
            &Theta::zeros(&b),
            &spec,
            &UpdaterSpec::reinforce(1.0),
            8,
            400,
            5,
            &mut Stream::new(4),
        )
        .unwrap();
        let cs: Vec<f64> = t.checkpoints.iter().map(|c| c.alignment.unwrap()).collect();
        assert_eq!(cs[0], 1.0);
        assert!(cs.windows(2).all(|w| w[1] <= w[0]));
        assert!(*cs.last().unwrap() < 1.0);
    }
}
