//! Finite batteries: scored tasks, a sampling law over them, and the scalar
//! capability `F(θ) = Σ_t μ(t) Σ_y π_θ(y|t) S_t(y)`.

use serde::{Deserialize, Serialize};

use crate::manifold::{Policy, Theta};
use crate::rng::Stream;
use crate::stats::Estimate;
use crate::{Error, Result};

/// Largest reduced-chart dimension accepted.
pub const MAX_DIM: usize = 512;
/// Largest `tasks × max outputs` table accepted.
pub const MAX_TABLE_ENTRIES: usize = 100_000;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// JSON form of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescription {
    pub prompt_id: String,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub family: String,
}

/// JSON form of a battery: `{"tasks": [...], "weights": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryDescription {
    pub tasks: Vec<TaskDescription>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub prompt_id: String,
    /// `S_t`, indexed by output.
    pub scores: Vec<f64>,
    /// `Q*(t)`: strict success means `S_t(y) >= threshold`.
    pub threshold: f64,
}

impl TaskSpec {
    pub fn num_outputs(&self) -> usize {
        self.scores.len()
    }
}

/// A prompt (task index) paired with one enumerated output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub task: usize,
    pub output: usize,
}

impl Interaction {
    pub fn new(task: usize, output: usize) -> Self {
        Self { task, output }
    }
}

/// Point of the representation space: per-task expected quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSample {
    pub quality: Vec<f64>,
    pub cost: f64,
}

/// Capability restricted to one family of tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub label: String,
    /// Total sampling mass of the family.
    pub weight: f64,
    /// Capability conditional on the family (0 if the family has no mass).
    pub capability: f64,
}

/// Immutable, validated battery.
#[derive(Debug, Clone)]
pub struct Battery {
    tasks: Vec<TaskSpec>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    family_of: Vec<usize>,
    family_labels: Vec<String>,
}

impl Battery {
    /// Validates a description. Weights summing to within `1e-9` of one are
    /// renormalized; anything further off is rejected.
    pub fn new(raw: &BatteryDescription) -> Result<Self> {
        if raw.tasks.is_empty() {
            return Err(Error::EmptyTaskSet);
        }
        if raw.weights.len() != raw.tasks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} tasks",
                raw.weights.len(),
                raw.tasks.len()
            )));
        }
        let mut tasks = Vec::with_capacity(raw.tasks.len());
        let mut family_labels: Vec<String> = Vec::new();
        let mut family_of = Vec::with_capacity(raw.tasks.len());
        let mut dim = 0;
        let mut max_k = 0;
        for (t, task) in raw.tasks.iter().enumerate() {
            if task.scores.len() < 2 {
                return Err(Error::TooFewOutputs {
                    task: t,
                    found: task.scores.len(),
                });
            }
            if let Some(&value) = task.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::ScoreOutOfRange { task: t, value });
            }
            if !(0.0..=1.0).contains(&task.threshold) {
                return Err(Error::ThresholdOutOfRange {
                    task: t,
                    value: task.threshold,
                });
            }
            dim += task.scores.len() - 1;
            max_k = max_k.max(task.scores.len());
            let family = match family_labels.iter().position(|l| *l == task.family) {
                Some(k) => k,
                None => {
                    family_labels.push(task.family.clone());
                    family_labels.len() - 1
                }
            };
            family_of.push(family);
            tasks.push(TaskSpec {
                prompt_id: task.prompt_id.clone(),
                scores: task.scores.clone(),
                threshold: task.threshold,
            });
        }
        if dim > MAX_DIM {
            return Err(Error::BatteryTooLarge(format!(
                "chart dimension {dim} exceeds {MAX_DIM}"
            )));
        }
        if tasks.len() * max_k > MAX_TABLE_ENTRIES {
            return Err(Error::BatteryTooLarge(format!(
                "{} tasks x {max_k} outputs exceeds {MAX_TABLE_ENTRIES} entries",
                tasks.len()
            )));
        }

        if let Some((index, &value)) = raw.weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
            return Err(Error::NegativeWeight { index, value });
        }
        let sum: f64 = raw.weights.iter().sum();
        if !((1.0 - WEIGHT_SUM_TOL)..=(1.0 + WEIGHT_SUM_TOL)).contains(&sum) {
            return Err(Error::WeightSumMismatch { sum });
        }
        let weights: Vec<f64> = raw.weights.iter().map(|w| w / sum).collect();
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }

        Ok(Self {
            tasks,
            weights,
            cumulative,
            family_of,
            family_labels,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BatteryDescription = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("battery JSON: {e}")))?;
        Self::new(&raw)
    }

    /// Round-trips back to the JSON description.
    pub fn description(&self) -> BatteryDescription {
        BatteryDescription {
            tasks: self
                .tasks
                .iter()
                .zip(&self.family_of)
                .map(|(t, &f)| TaskDescription {
                    prompt_id: t.prompt_id.clone(),
                    scores: t.scores.clone(),
                    threshold: t.threshold,
                    family: self.family_labels[f].clone(),
                })
                .collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &TaskSpec {
        &self.tasks[t]
    }

    pub fn num_outputs(&self, t: usize) -> usize {
        self.tasks[t].scores.len()
    }

    /// Sampling law `μ` over tasks.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn family_labels(&self) -> &[String] {
        &self.family_labels
    }

    pub fn family_of(&self, t: usize) -> usize {
        self.family_of[t]
    }

    /// Dimension of the reduced-logit chart, `Σ_t (K_t - 1)`.
    pub fn dim(&self) -> usize {
        self.tasks.iter().map(|t| t.num_outputs() - 1).sum()
    }

    /// All interactions, task-major and output-minor.
    pub fn interactions(&self) -> impl Iterator<Item = Interaction> + '_ {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(t, task)| (0..task.num_outputs()).map(move |y| Interaction::new(t, y)))
    }

    pub fn num_interactions(&self) -> usize {
        self.tasks.iter().map(TaskSpec::num_outputs).sum()
    }

    pub fn check(&self, i: Interaction) -> Result<()> {
        if i.task >= self.tasks.len() {
            return Err(Error::IndexOutOfRange(format!(
                "task {} of {}",
                i.task,
                self.tasks.len()
            )));
        }
        if i.output >= self.tasks[i.task].num_outputs() {
            return Err(Error::IndexOutOfRange(format!(
                "output {} of {} in task {}",
                i.output,
                self.tasks[i.task].num_outputs(),
                i.task
            )));
        }
        Ok(())
    }

    /// Score lookup without bounds reporting; callers hold valid indices.
    pub(crate) fn score(&self, i: Interaction) -> f64 {
        self.tasks[i.task].scores[i.output]
    }

    pub(crate) fn draw_task(&self, rng: &mut Stream) -> usize {
        let u = rng.uniform();
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.tasks.len() - 1)
    }
}

/// `n` i.i.d. task draws from the sampling law.
pub fn sample_inputs(b: &Battery, n: usize, rng: &mut Stream) -> Vec<usize> {
    (0..n).map(|_| b.draw_task(rng)).collect()
}

/// `S_t(ω)` for the interaction's task and output.
pub fn external_score(b: &Battery, i: Interaction) -> Result<f64> {
    b.check(i)?;
    Ok(b.score(i))
}

/// Expected quality of each task under `θ`.
pub fn task_qualities(b: &Battery, theta: &Theta) -> Result<Vec<f64>> {
    let policy = Policy::new(b, theta)?;
    Ok(b.tasks
        .iter()
        .enumerate()
        .map(|(t, task)| crate::stats::dot(policy.probs(t), &task.scores))
        .collect())
}

/// Exact `F(θ)`.
pub fn capability_exact(b: &Battery, theta: &Theta) -> Result<f64> {
    let q = task_qualities(b, theta)?;
    Ok(crate::stats::dot(&b.weights, &q))
}

/// Monte Carlo estimate of `F(θ)` from `n` generated interactions.
pub fn capability_estimate(
    b: &Battery,
    theta: &Theta,
    n: usize,
    rng: &mut Stream,
) -> Result<Estimate> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "capability_estimate needs n >= 2".into(),
        ));
    }
    let batch = crate::gvu::generate(b, theta, n, rng)?;
    let scores: Vec<f64> = batch.interactions.iter().map(|&i| b.score(i)).collect();
    Ok(Estimate::from_samples(&scores))
}

/// Probability of strict success, `Σ_t μ(t) P_θ(S_t(y) >= Q*(t))`.
pub fn strict_success_rate(b: &Battery, theta: &Theta) -> Result<f64> {
    let policy = Policy::new(b, theta)?;
    Ok(b.tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let hit: f64 = policy
                .probs(t)
                .iter()
                .zip(&task.scores)
                .filter(|(_, s)| **s >= task.threshold)
                .map(|(p, _)| p)
                .sum();
            b.weights[t] * hit
        })
        .sum())
}

/// Per-family capability. `Σ weight * capability` reproduces `F(θ)`.
pub fn family_capabilities(b: &Battery, theta: &Theta) -> Result<Vec<FamilyScore>> {
    let q = task_qualities(b, theta)?;
    let mut mass = vec![0.0; b.family_labels.len()];
    let mut total = vec![0.0; b.family_labels.len()];
    for (t, &f) in b.family_of.iter().enumerate() {
        mass[f] += b.weights[t];
        total[f] += b.weights[t] * q[t];
    }
    Ok(b.family_labels
        .iter()
        .enumerate()
        .map(|(f, label)| FamilyScore {
            label: label.clone(),
            weight: mass[f],
            capability: if mass[f] > 0.0 {
                total[f] / mass[f]
            } else {
                0.0
            },
        })
        .collect())
}

/// Exact representation point: per-task quality, zero sampling cost.
pub fn represent(b: &Battery, theta: &Theta) -> Result<RepresentationSample> {
    Ok(RepresentationSample {
        quality: task_qualities(b, theta)?,
        cost: 0.0,
    })
}

/// Convenience builder used by tests and examples: one task per score row,
/// thresholds `0.5`, a single family, the given weights.
pub fn simple_battery(scores: &[Vec<f64>], weights: &[f64]) -> Result<Battery> {
    Battery::new(&BatteryDescription {
        tasks: scores
            .iter()
            .enumerate()
            .map(|(t, s)| TaskDescription {
                prompt_id: format!("t{t}"),
                scores: s.clone(),
                threshold: 0.5,
                family: "default".into(),
            })
            .collect(),
        weights: weights.to_vec(),
    })
}
