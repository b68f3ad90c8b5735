//! The GVU operator: generate a batch from the current policy, score it with
//! an internal potential, and update the parameters.
//!
//! Two updaters are provided. [`update_argmin`] is the weighted regularized
//! likelihood step: the verifier turns potentials into softmax weights at
//! inverse temperature `beta` and the updater descends
//! `Σ w_i (-log π'(y_i|x_i)) + λ ‖θ' - θ‖²`. [`update_reinforce`] skips the
//! weighting and uses potentials as REINFORCE coefficients,
//! `ĝ = (1/N) Σ V_i s_θ(x_i, y_i)`, `θ' = θ + η ĝ`; every estimator in
//! [`crate::diagnostics`] is stated for this form.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::battery::{Battery, Interaction};
use crate::manifold::{softmax_reduced, Policy, TangentVector, Theta};
use crate::rng::Stream;
use crate::{Error, Result};

/// Logits must stay inside `[-LOGIT_LIMIT, LOGIT_LIMIT]`.
pub const LOGIT_LIMIT: f64 = 100.0;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub interactions: Vec<Interaction>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// The verifier's weighted empirical measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedBatch {
    pub interactions: Vec<Interaction>,
    pub weights: Vec<f64>,
}

/// Internal potentials.
#[derive(Debug, Clone, PartialEq)]
pub enum VerifierKind {
    /// `V = S`.
    Oracle,
    /// `V = S + N(0, tau²)`.
    Noisy { tau: f64 },
    /// Mean of `judges` independent noisy judges sharing `tau`.
    Ensemble { tau: f64, judges: usize },
    /// Rewards `S + N(0, tau²)` standardized within each task's sub-batch.
    Group { eps: f64, tau: f64 },
    /// `log π_θ(y|x) - log π_ref(y|x)`.
    Discriminator { reference: Theta },
    /// `value + N(0, tau²)`, independent of the interaction.
    Constant { value: f64, tau: f64 },
    /// Noisy verifier with effective noise `tau * temp_ratio`.
    Cold { tau: f64, temp_ratio: f64 },
    /// `c S + (1 - c) J` with a fixed random table `J` drawn from `junk_seed`;
    /// `alignment` is the current `c`, decayed along a trajectory.
    Goodhart {
        gamma: f64,
        junk_seed: u64,
        alignment: f64,
    },
}

impl VerifierKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Noisy { .. } => "noisy",
            Self::Ensemble { .. } => "ensemble",
            Self::Group { .. } => "group",
            Self::Discriminator { .. } => "discriminator",
            Self::Constant { .. } => "constant",
            Self::Cold { .. } => "cold",
            Self::Goodhart { .. } => "goodhart",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierSpec {
    pub kind: VerifierKind,
    /// Inverse temperature of the softmax weighting (argmin mode).
    pub beta: f64,
}

impl VerifierSpec {
    pub fn new(kind: VerifierKind, beta: f64) -> Result<Self> {
        let spec = Self { kind, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn oracle() -> Self {
        Self {
            kind: VerifierKind::Oracle,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn nonneg(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::MissingParameter(name.into()))
            }
        }
        nonneg("beta", self.beta)?;
        match &self.kind {
            VerifierKind::Oracle => {}
            VerifierKind::Noisy { tau } => nonneg("tau", *tau)?,
            VerifierKind::Ensemble { tau, judges } => {
                nonneg("tau", *tau)?;
                if *judges == 0 {
                    return Err(Error::MissingParameter("judges".into()));
                }
            }
            VerifierKind::Group { eps, tau } => {
                nonneg("eps", *eps)?;
                nonneg("tau", *tau)?;
            }
            VerifierKind::Discriminator { reference } => {
                if !reference.is_finite() {
                    return Err(Error::MissingParameter("ref_theta".into()));
                }
            }
            VerifierKind::Constant { value, tau } => {
                if !value.is_finite() {
                    return Err(Error::MissingParameter("const_value".into()));
                }
                nonneg("tau", *tau)?;
            }
            VerifierKind::Cold { tau, temp_ratio } => {
                nonneg("tau", *tau)?;
                if !(*temp_ratio > 0.0 && *temp_ratio <= 1.0) {
                    return Err(Error::MissingParameter("temp_ratio".into()));
                }
            }
            VerifierKind::Goodhart {
                gamma, alignment, ..
            } => {
                nonneg("gamma", *gamma)?;
                if !(0.0..=1.0).contains(alignment) {
                    return Err(Error::MissingParameter("alignment".into()));
                }
            }
        }
        Ok(())
    }

    /// Current Goodhart alignment state, if this is a goodhart verifier.
    pub fn alignment(&self) -> Option<f64> {
        match self.kind {
            VerifierKind::Goodhart { alignment, .. } => Some(alignment),
            _ => None,
        }
    }

    pub fn set_alignment(&mut self, c: f64) {
        if let VerifierKind::Goodhart { alignment, .. } = &mut self.kind {
            *alignment = c;
        }
    }

    /// Parses `{"kind": ..., "beta": ..., <kind parameters>}`.
    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::InvalidArgument("verifier must be a JSON object".into()))?;
        let kind_name = obj
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MissingParameter("kind".into()))?;
        let num = |name: &str| -> Result<f64> {
            obj.get(name)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::MissingParameter(name.into()))
        };
        let opt_num = |name: &str, default: f64| -> Result<f64> {
            match obj.get(name) {
                None => Ok(default),
                Some(v) => v
                    .as_f64()
                    .ok_or_else(|| Error::MissingParameter(name.into())),
            }
        };
        let uint = |name: &str| -> Result<u64> {
            obj.get(name)
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::MissingParameter(name.into()))
        };
        let (kind, allowed): (VerifierKind, &[&str]) = match kind_name {
            "oracle" => (VerifierKind::Oracle, &[]),
            "noisy" => (VerifierKind::Noisy { tau: num("tau")? }, &["tau"]),
            "ensemble" => (
                VerifierKind::Ensemble {
                    tau: num("tau")?,
                    judges: uint("judges")? as usize,
                },
                &["tau", "judges"],
            ),
            "group" => (
                VerifierKind::Group {
                    eps: num("eps")?,
                    tau: opt_num("tau", 0.0)?,
                },
                &["eps", "tau"],
            ),
            "discriminator" => {
                let raw = obj
                    .get("ref_theta")
                    .ok_or_else(|| Error::MissingParameter("ref_theta".into()))?;
                let reference: Theta = serde_json::from_value(raw.clone())
                    .map_err(|_| Error::MissingParameter("ref_theta".into()))?;
                (VerifierKind::Discriminator { reference }, &["ref_theta"])
            }
            "constant" => (
                VerifierKind::Constant {
                    value: num("const_value")?,
                    tau: opt_num("tau", 0.0)?,
                },
                &["const_value", "tau"],
            ),
            "cold" => (
                VerifierKind::Cold {
                    tau: num("tau")?,
                    temp_ratio: num("temp_ratio")?,
                },
                &["tau", "temp_ratio"],
            ),
            "goodhart" => (
                VerifierKind::Goodhart {
                    gamma: num("gamma")?,
                    junk_seed: uint("junk_seed")?,
                    alignment: opt_num("alignment", 1.0)?,
                },
                &["gamma", "junk_seed", "alignment"],
            ),
            other => return Err(Error::UnknownKind(other.into())),
        };
        if let Some(extra) = obj
            .keys()
            .find(|k| !matches!(k.as_str(), "kind" | "beta") && !allowed.contains(&k.as_str()))
        {
            return Err(Error::InvalidArgument(format!(
                "unexpected field `{extra}` for verifier kind `{kind_name}`"
            )));
        }
        Self::new(kind, num("beta")?)
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("kind".into(), json!(self.kind.name()));
        m.insert("beta".into(), json!(self.beta));
        match &self.kind {
            VerifierKind::Oracle => {}
            VerifierKind::Noisy { tau } => {
                m.insert("tau".into(), json!(tau));
            }
            VerifierKind::Ensemble { tau, judges } => {
                m.insert("tau".into(), json!(tau));
                m.insert("judges".into(), json!(judges));
            }
            VerifierKind::Group { eps, tau } => {
                m.insert("eps".into(), json!(eps));
                m.insert("tau".into(), json!(tau));
            }
            VerifierKind::Discriminator { reference } => {
                m.insert(
                    "ref_theta".into(),
                    serde_json::to_value(reference).expect("finite theta"),
                );
            }
            VerifierKind::Constant { value, tau } => {
                m.insert("const_value".into(), json!(value));
                m.insert("tau".into(), json!(tau));
            }
            VerifierKind::Cold { tau, temp_ratio } => {
                m.insert("tau".into(), json!(tau));
                m.insert("temp_ratio".into(), json!(temp_ratio));
            }
            VerifierKind::Goodhart {
                gamma,
                junk_seed,
                alignment,
            } => {
                m.insert("gamma".into(), json!(gamma));
                m.insert("junk_seed".into(), json!(junk_seed));
                m.insert("alignment".into(), json!(alignment));
            }
        }
        Value::Object(m)
    }
}

impl Serialize for VerifierSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for VerifierSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        Self::from_json(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Argmin,
    Reinforce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdaterSpec {
    pub mode: UpdateMode,
    pub eta: f64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_tol: Option<f64>,
}

impl UpdaterSpec {
    pub fn reinforce(eta: f64) -> Self {
        Self {
            mode: UpdateMode::Reinforce,
            eta,
            lambda: 0.0,
            inner_steps: None,
            inner_tol: None,
        }
    }

    pub fn argmin(eta: f64, lambda: f64, inner_steps: usize, inner_tol: f64) -> Self {
        Self {
            mode: UpdateMode::Argmin,
            eta,
            lambda,
            inner_steps: Some(inner_steps),
            inner_tol: Some(inner_tol),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::MissingParameter("eta".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::MissingParameter("lambda".into()));
        }
        if self.mode == UpdateMode::Argmin {
            if !matches!(self.inner_steps, Some(s) if s >= 1) {
                return Err(Error::MissingParameter("inner_steps".into()));
            }
            if !matches!(self.inner_tol, Some(t) if t > 0.0) {
                return Err(Error::MissingParameter("inner_tol".into()));
            }
        }
        Ok(())
    }
}

/// Samples `n` interactions from `μ ⊗ π_θ`.
pub fn generate(b: &Battery, theta: &Theta, n: usize, rng: &mut Stream) -> Result<Batch> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let policy = Policy::new(b, theta)?;
    Ok(generate_with(b, &policy, n, rng))
}

pub(crate) fn generate_with(b: &Battery, policy: &Policy, n: usize, rng: &mut Stream) -> Batch {
    let interactions = (0..n)
        .map(|_| {
            let t = b.draw_task(rng);
            Interaction::new(t, policy.draw_output(t, rng))
        })
        .collect();
    Batch { interactions }
}

/// Standardizes `rewards` within groups sharing a task index, using the
/// population standard deviation. Singleton groups, and groups whose rewards
/// are all equal with `eps = 0`, get advantage 0.
pub fn group_advantages(tasks: &[usize], rewards: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(tasks.len(), rewards.len());
    let n_groups = tasks.iter().copied().max().map_or(0, |m| m + 1);
    let mut count = vec![0usize; n_groups];
    let mut sum = vec![0.0; n_groups];
    for (&t, &r) in tasks.iter().zip(rewards) {
        count[t] += 1;
        sum[t] += r;
    }
    let means: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| s / c.max(1) as f64)
        .collect();
    let mut ss = vec![0.0; n_groups];
    for (&t, &r) in tasks.iter().zip(rewards) {
        ss[t] += (r - means[t]) * (r - means[t]);
    }
    tasks
        .iter()
        .zip(rewards)
        .map(|(&t, &r)| {
            if count[t] < 2 {
                return 0.0;
            }
            let denom = (ss[t] / count[t] as f64).sqrt() + eps;
            if denom > 0.0 {
                (r - means[t]) / denom
            } else {
                0.0
            }
        })
        .collect()
}

/// The fixed junk table `J` of a goodhart verifier, in interaction
/// enumeration order (task-major, output-minor).
pub fn junk_table(b: &Battery, junk_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Stream::new(junk_seed).named("junk");
    (0..b.num_tasks())
        .map(|t| (0..b.num_outputs(t)).map(|_| rng.uniform()).collect())
        .collect()
}

fn log_prob(theta: &Theta, i: Interaction) -> f64 {
    let block = theta.block(i.task);
    let m = block.iter().fold(0.0f64, |m, &v| m.max(v));
    let lse = m + ((-m).exp() + block.iter().map(|v| (v - m).exp()).sum::<f64>()).ln();
    let logit = if i.output == 0 {
        0.0
    } else {
        block[i.output - 1]
    };
    logit - lse
}

fn check_batch(b: &Battery, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    batch.interactions.iter().try_for_each(|&i| b.check(i))
}

/// Internal potential `V(x_i, y_i)` for every batch element.
pub fn potential(
    spec: &VerifierSpec,
    b: &Battery,
    theta: &Theta,
    batch: &Batch,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    spec.validate()?;
    check_batch(b, batch)?;
    theta.check_compatible(b)?;
    let scores = || batch.interactions.iter().map(|&i| b.score(i));
    let normal = |rng: &mut Stream| -> f64 { rng.sample(StandardNormal) };
    Ok(match &spec.kind {
        VerifierKind::Oracle => scores().collect(),
        VerifierKind::Noisy { tau } => scores().map(|s| s + tau * normal(rng)).collect(),
        VerifierKind::Ensemble { tau, judges } => scores()
            .map(|s| {
                let noise: f64 = (0..*judges).map(|_| tau * normal(rng)).sum();
                s + noise / *judges as f64
            })
            .collect(),
        VerifierKind::Group { eps, tau } => {
            let rewards: Vec<f64> = scores().map(|s| s + tau * normal(rng)).collect();
            let tasks: Vec<usize> = batch.interactions.iter().map(|i| i.task).collect();
            group_advantages(&tasks, &rewards, *eps)
        }
        VerifierKind::Discriminator { reference } => {
            reference.check_compatible(b)?;
            batch
                .interactions
                .iter()
                .map(|&i| log_prob(theta, i) - log_prob(reference, i))
                .collect()
        }
        VerifierKind::Constant { value, tau } => {
            if *tau == 0.0 {
                vec![*value; batch.len()]
            } else {
                (0..batch.len())
                    .map(|_| value + tau * normal(rng))
                    .collect()
            }
        }
        VerifierKind::Cold { tau, temp_ratio } => {
            let sd = tau * temp_ratio;
            scores().map(|s| s + sd * normal(rng)).collect()
        }
        VerifierKind::Goodhart {
            junk_seed,
            alignment,
            ..
        } => {
            let junk = junk_table(b, *junk_seed);
            let c = *alignment;
            batch
                .interactions
                .iter()
                .map(|&i| c * b.score(i) + (1.0 - c) * junk[i.task][i.output])
                .collect()
        }
    })
}

/// Softmax weights `w_i ∝ exp(β V_i)`.
pub fn verify(spec: &VerifierSpec, potentials: &[f64], batch: &Batch) -> Result<WeightedBatch> {
    if potentials.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} potentials for a batch of {}",
            potentials.len(),
            batch.len()
        )));
    }
    if let Some(i) = potentials.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore(i));
    }
    let n = potentials.len();
    let weights = if spec.beta == 0.0 {
        vec![1.0 / n as f64; n]
    } else {
        let m = potentials.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = potentials
            .iter()
            .map(|v| (spec.beta * (v - m)).exp())
            .collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    Ok(WeightedBatch {
        interactions: batch.interactions.clone(),
        weights,
    })
}

/// Outcome of the inner descent of [`update_argmin`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArgminOutcome {
    pub theta: Theta,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

struct WeightedMle<'a> {
    anchor: &'a Theta,
    lambda: f64,
    /// Aggregated weight per (task, output).
    mass: Vec<Vec<f64>>,
}

impl WeightedMle<'_> {
    fn objective(&self, theta: &Theta) -> f64 {
        let mut nll = 0.0;
        let mut p = Vec::new();
        for (t, w) in self.mass.iter().enumerate() {
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            softmax_reduced(theta.block(t), &mut p);
            nll -= w
                .iter()
                .zip(&p)
                .filter(|(wy, _)| **wy > 0.0)
                .map(|(wy, py)| wy * py.ln())
                .sum::<f64>();
        }
        let reg: f64 = theta
            .as_slice()
            .iter()
            .zip(self.anchor.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        nll + self.lambda * reg
    }

    fn gradient(&self, theta: &Theta) -> TangentVector {
        let mut g = theta.zero_tangent();
        let mut p = Vec::new();
        for (t, w) in self.mass.iter().enumerate() {
            let total: f64 = w.iter().sum();
            softmax_reduced(theta.block(t), &mut p);
            let block = g.block_mut(t);
            for (k, slot) in block.iter_mut().enumerate() {
                *slot = total * p[k + 1] - w[k + 1];
            }
        }
        for ((gi, a), b) in g
            .as_mut_slice()
            .iter_mut()
            .zip(theta.as_slice())
            .zip(self.anchor.as_slice())
        {
            *gi += 2.0 * self.lambda * (a - b);
        }
        g
    }
}

fn check_logits(theta: &Theta) -> Result<()> {
    match theta.as_slice().iter().find(|v| !(v.abs() <= LOGIT_LIMIT)) {
        Some(&value) => Err(Error::NumericalOverflow { value }),
        None => Ok(()),
    }
}

/// Gradient descent with backtracking on the weighted regularized likelihood.
///
/// Non-convergence within `inner_steps` is reported through
/// [`ArgminOutcome::converged`], not as an error.
pub fn update_argmin(
    b: &Battery,
    theta: &Theta,
    wb: &WeightedBatch,
    spec: &UpdaterSpec,
) -> Result<ArgminOutcome> {
    spec.validate()?;
    if spec.mode != UpdateMode::Argmin {
        return Err(Error::InvalidArgument(
            "update_argmin requires mode = argmin".into(),
        ));
    }
    theta.check_compatible(b)?;
    let mut mass: Vec<Vec<f64>> = (0..b.num_tasks())
        .map(|t| vec![0.0; b.num_outputs(t)])
        .collect();
    for (&i, &w) in wb.interactions.iter().zip(&wb.weights) {
        b.check(i)?;
        mass[i.task][i.output] += w;
    }
    let problem = WeightedMle {
        anchor: theta,
        lambda: spec.lambda,
        mass,
    };
    let steps = spec.inner_steps.unwrap_or(1);
    let tol = spec.inner_tol.unwrap_or(f64::MIN_POSITIVE);

    let mut current = theta.clone();
    let mut value = problem.objective(&current);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < steps {
        let grad = problem.gradient(&current);
        if grad.norm() <= tol {
            converged = true;
            break;
        }
        let mut step = spec.eta;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = current.step(&grad, -step)?;
            let v = problem.objective(&candidate);
            if v <= value {
                accepted = Some((candidate, v));
                break;
            }
            step *= 0.5;
        }
        let Some((next, v)) = accepted else { break };
        check_logits(&next)?;
        current = next;
        value = v;
        iterations += 1;
    }
    if !converged {
        converged = problem.gradient(&current).norm() <= tol;
    }
    Ok(ArgminOutcome {
        theta: current,
        converged,
        iterations,
        objective: value,
    })
}

/// REINFORCE estimate `ĝ = (1/N) Σ V_i s_θ(x_i, y_i)`.
pub fn reinforce_estimate(
    theta: &Theta,
    batch: &Batch,
    potentials: &[f64],
) -> Result<TangentVector> {
    if potentials.len() != batch.len() || batch.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} potentials for a batch of {}",
            potentials.len(),
            batch.len()
        )));
    }
    for i in &batch.interactions {
        if i.task >= theta.num_tasks() || i.output > theta.block(i.task).len() {
            return Err(Error::ShapeMismatch(format!(
                "interaction {i:?} does not fit the parameter layout"
            )));
        }
    }
    let policy = Policy::from_theta(theta);
    Ok(reinforce_with(&policy, theta, batch, potentials))
}

pub(crate) fn reinforce_with(
    policy: &Policy,
    theta: &Theta,
    batch: &Batch,
    potentials: &[f64],
) -> TangentVector {
    let mut g = theta.zero_tangent();
    let scale = 1.0 / batch.len() as f64;
    for (&i, &v) in batch.interactions.iter().zip(potentials) {
        if v != 0.0 {
            policy.add_score(&mut g, i, v * scale);
        }
    }
    g
}

/// `θ' = θ + η ĝ`; returns `θ'` and the realized `ĝ`.
pub fn update_reinforce(
    theta: &Theta,
    batch: &Batch,
    potentials: &[f64],
    spec: &UpdaterSpec,
) -> Result<(Theta, TangentVector)> {
    spec.validate()?;
    if spec.mode != UpdateMode::Reinforce {
        return Err(Error::InvalidArgument(
            "update_reinforce requires mode = reinforce".into(),
        ));
    }
    let g = reinforce_estimate(theta, batch, potentials)?;
    let next = theta.step(&g, spec.eta)?;
    check_logits(&next)?;
    Ok((next, g))
}

/// Summary of one application of the GVU operator.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub batch_size: usize,
    /// Samples consumed by this step.
    pub consumed: u64,
    pub potential_mean: f64,
    pub potential_std: f64,
    pub potential_min: f64,
    pub potential_max: f64,
    /// `‖θ' - θ‖` in the chart.
    pub step_norm: f64,
    /// Realized `ĝ` (reinforce mode).
    pub ghat: Option<TangentVector>,
    /// Verifier weights (argmin mode).
    pub weights: Option<Vec<f64>>,
    /// Inner descent converged (always true in reinforce mode).
    pub converged: bool,
}

impl StepRecord {
    pub fn ghat_norm(&self) -> f64 {
        self.ghat.as_ref().map_or(0.0, TangentVector::norm)
    }

    pub fn max_weight(&self) -> f64 {
        self.weights
            .as_ref()
            .map_or(0.0, |w| w.iter().copied().fold(0.0, f64::max))
    }
}

/// One step `θ ↦ U(θ, V(G(θ)))`.
pub fn gvu_step(
    b: &Battery,
    theta: &Theta,
    n: usize,
    vspec: &VerifierSpec,
    uspec: &UpdaterSpec,
    rng: &mut Stream,
) -> Result<(Theta, StepRecord)> {
    vspec.validate()?;
    uspec.validate()?;
    let batch = generate(b, theta, n, rng)?;
    let v = potential(vspec, b, theta, &batch, rng)?;
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let (next, ghat, weights, converged) = match uspec.mode {
        UpdateMode::Reinforce => {
            let (next, g) = update_reinforce(theta, &batch, &v, uspec)?;
            (next, Some(g), None, true)
        }
        UpdateMode::Argmin => {
            let wb = verify(vspec, &v, &batch)?;
            let out = update_argmin(b, theta, &wb, uspec)?;
            (out.theta, None, Some(wb.weights), out.converged)
        }
    };
    let step_norm = next.diff(theta)?.norm();
    Ok((
        next,
        StepRecord {
            batch_size: n,
            consumed: n as u64,
            potential_mean: mean,
            potential_std: var.sqrt(),
            potential_min: lo,
            potential_max: hi,
            step_norm,
            ghat,
            weights,
            converged,
        },
    ))
}
