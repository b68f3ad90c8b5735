//! Tabular reduced-logit policies and their information geometry.
//!
//! Each task `t` with `K_t` outputs gets a block of `K_t - 1` logits; output 0
//! is pinned to logit 0. The full softmax chart has a shift-invariant direction
//! per task, which would make the Fisher matrix singular. Pinning removes it.
//!
//! In this chart the score of interaction `(t, y)` is supported on block `t`,
//! with coordinate `k` (output `k = 1..K_t-1`) equal to `1{y = k} - π(k|t)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::battery::{Battery, Interaction};
use crate::rng::Stream;
use crate::{Error, Result};

/// Smallest eigenvalue accepted by [`natural_gradient`].
pub const MIN_EIGENVALUE: f64 = 1e-12;
/// Smallest metric norm accepted by [`fisher_angle`].
pub const MIN_METRIC_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
struct Blocks {
    values: Vec<f64>,
    /// `offsets[t]..offsets[t + 1]` is block `t`.
    offsets: Arc<[usize]>,
}

impl Blocks {
    fn from_nested(blocks: Vec<Vec<f64>>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        offsets.push(0);
        let mut values = Vec::new();
        for b in blocks {
            values.extend(b);
            offsets.push(values.len());
        }
        Self {
            values,
            offsets: offsets.into(),
        }
    }

    fn zeros_for(b: &Battery) -> Self {
        Self::from_nested(
            (0..b.num_tasks())
                .map(|t| vec![0.0; b.num_outputs(t) - 1])
                .collect(),
        )
    }

    fn block(&self, t: usize) -> &[f64] {
        &self.values[self.offsets[t]..self.offsets[t + 1]]
    }

    fn block_mut(&mut self, t: usize) -> &mut [f64] {
        let (lo, hi) = (self.offsets[t], self.offsets[t + 1]);
        &mut self.values[lo..hi]
    }

    fn num_blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..self.num_blocks())
            .map(|t| self.block(t).to_vec())
            .collect()
    }

    fn same_shape(&self, other: &Blocks) -> bool {
        self.offsets == other.offsets
    }

    fn fits(&self, b: &Battery) -> bool {
        self.num_blocks() == b.num_tasks()
            && (0..b.num_tasks()).all(|t| self.block(t).len() + 1 == b.num_outputs(t))
    }
}

macro_rules! block_accessors {
    ($ty:ident) => {
        impl $ty {
            /// Builds from per-task blocks, in task order.
            pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Self {
                Self(Blocks::from_nested(blocks))
            }

            pub fn zeros(b: &Battery) -> Self {
                Self(Blocks::zeros_for(b))
            }

            pub fn block(&self, t: usize) -> &[f64] {
                self.0.block(t)
            }

            pub fn block_mut(&mut self, t: usize) -> &mut [f64] {
                self.0.block_mut(t)
            }

            pub fn num_tasks(&self) -> usize {
                self.0.num_blocks()
            }

            pub fn dim(&self) -> usize {
                self.0.values.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0.values
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0.values
            }

            pub fn to_blocks(&self) -> Vec<Vec<f64>> {
                self.0.to_nested()
            }

            pub fn check_compatible(&self, b: &Battery) -> Result<()> {
                if self.0.fits(b) {
                    Ok(())
                } else {
                    Err(Error::ShapeMismatch(format!(
                        "{} blocks / dim {} do not fit a battery with {} tasks / dim {}",
                        self.num_tasks(),
                        self.dim(),
                        b.num_tasks(),
                        b.dim()
                    )))
                }
            }
        }
    };
}

/// A parameter point: reduced logits, one block per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta(Blocks);

/// An element of the tangent space at some [`Theta`]; same block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Blocks);

block_accessors!(Theta);
block_accessors!(TangentVector);

impl Theta {
    /// Logits drawn uniformly from `[-c, c]`.
    pub fn uniform(b: &Battery, c: f64, rng: &mut Stream) -> Self {
        let mut theta = Self::zeros(b);
        for v in theta.as_mut_slice() {
            *v = c * (2.0 * rng.uniform() - 1.0);
        }
        theta
    }

    /// `self + eta * v`.
    pub fn step(&self, v: &TangentVector, eta: f64) -> Result<Theta> {
        if !self.0.same_shape(&v.0) {
            return Err(Error::ShapeMismatch(
                "tangent does not match parameter layout".into(),
            ));
        }
        let mut out = self.clone();
        for (x, d) in out.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *x += eta * d;
        }
        Ok(out)
    }

    /// Chart difference `self - other` as a tangent vector.
    pub fn diff(&self, other: &Theta) -> Result<TangentVector> {
        if !self.0.same_shape(&other.0) {
            return Err(Error::ShapeMismatch("parameter layouts differ".into()));
        }
        let mut out = TangentVector(other.0.clone());
        for ((o, a), b) in out
            .as_mut_slice()
            .iter_mut()
            .zip(self.as_slice())
            .zip(other.as_slice())
        {
            *o = a - b;
        }
        Ok(out)
    }

    pub fn zero_tangent(&self) -> TangentVector {
        TangentVector(Blocks {
            values: vec![0.0; self.dim()],
            offsets: self.0.offsets.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }
}

impl TangentVector {
    pub fn from_vec_like(values: Vec<f64>, like: &TangentVector) -> Self {
        assert_eq!(values.len(), like.dim());
        Self(Blocks {
            values,
            offsets: like.0.offsets.clone(),
        })
    }

    pub fn norm(&self) -> f64 {
        crate::stats::norm2(self.as_slice()).sqrt()
    }

    pub fn norm2(&self) -> f64 {
        crate::stats::norm2(self.as_slice())
    }

    pub fn dot(&self, other: &TangentVector) -> f64 {
        crate::stats::dot(self.as_slice(), other.as_slice())
    }

    pub fn scaled(&self, c: f64) -> TangentVector {
        let mut out = self.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &TangentVector) {
        for (a, b) in self.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a += c * b;
        }
    }

    pub fn sub(&self, other: &TangentVector) -> TangentVector {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.as_slice().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.as_slice())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaJson {
    logits: Vec<Vec<f64>>,
}

impl Serialize for Theta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ThetaJson {
            logits: self.to_blocks(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Theta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = ThetaJson::deserialize(d)?;
        if raw.logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(serde::de::Error::custom("non-finite logit"));
        }
        Ok(Theta::from_blocks(raw.logits))
    }
}

impl Serialize for TangentVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_blocks().serialize(s)
    }
}

impl<'de> Deserialize<'de> for TangentVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let blocks = Vec::<Vec<f64>>::deserialize(d)?;
        if blocks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(serde::de::Error::custom("non-finite component"));
        }
        Ok(TangentVector::from_blocks(blocks))
    }
}

/// Softmax of `(0, logits)` with max subtraction.
pub(crate) fn softmax_reduced(logits: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let m = logits.iter().fold(0.0f64, |m, &v| m.max(v));
    out.push((-m).exp());
    out.extend(logits.iter().map(|&v| (v - m).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
}

/// Conditional distributions of one parameter point, cached per task.
#[derive(Debug, Clone)]
pub struct Policy {
    probs: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(b: &Battery, theta: &Theta) -> Result<Self> {
        theta.check_compatible(b)?;
        Ok(Self::from_theta(theta))
    }

    /// Policy of `theta` without a battery to check the layout against.
    pub fn from_theta(theta: &Theta) -> Self {
        let mut probs = Vec::with_capacity(theta.num_tasks());
        let mut cumulative = Vec::with_capacity(theta.num_tasks());
        for t in 0..theta.num_tasks() {
            let mut p = Vec::new();
            softmax_reduced(theta.block(t), &mut p);
            let mut acc = 0.0;
            cumulative.push(
                p.iter()
                    .map(|x| {
                        acc += x;
                        acc
                    })
                    .collect(),
            );
            probs.push(p);
        }
        Self { probs, cumulative }
    }

    pub fn probs(&self, t: usize) -> &[f64] {
        &self.probs[t]
    }

    pub fn prob(&self, i: Interaction) -> f64 {
        self.probs[i.task][i.output]
    }

    pub(crate) fn draw_output(&self, t: usize, rng: &mut Stream) -> usize {
        let u = rng.uniform();
        let c = &self.cumulative[t];
        c.partition_point(|&x| x <= u).min(c.len() - 1)
    }

    /// `tangent += coeff * s_θ(i)`, touching only block `i.task`.
    pub(crate) fn add_score(&self, tangent: &mut TangentVector, i: Interaction, coeff: f64) {
        let p = &self.probs[i.task];
        let block = tangent.block_mut(i.task);
        for (k, slot) in block.iter_mut().enumerate() {
            let indicator = if i.output == k + 1 { 1.0 } else { 0.0 };
            *slot += coeff * (indicator - p[k + 1]);
        }
    }
}

/// `π_θ(·|task)`.
pub fn policy_probs(theta: &Theta, task: usize) -> Result<Vec<f64>> {
    if task >= theta.num_tasks() {
        return Err(Error::ShapeMismatch(format!(
            "task {task} but parameter has {} blocks",
            theta.num_tasks()
        )));
    }
    let mut p = Vec::new();
    softmax_reduced(theta.block(task), &mut p);
    Ok(p)
}

/// `∇_θ log π_θ(y|x)`.
pub fn score_function(b: &Battery, theta: &Theta, i: Interaction) -> Result<TangentVector> {
    b.check(i)?;
    let policy = Policy::new(b, theta)?;
    let mut s = theta.zero_tangent();
    policy.add_score(&mut s, i, 1.0);
    Ok(s)
}

/// Dense symmetric Fisher information in the reduced chart.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    offsets: Arc<[usize]>,
}

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Chart coordinate of `(task, output)`; `None` for the pinned output 0.
    pub fn coordinate(&self, task: usize, output: usize) -> Option<usize> {
        if output == 0 || task + 1 >= self.offsets.len() {
            return None;
        }
        let c = self.offsets[task] + output - 1;
        (c < self.offsets[task + 1]).then_some(c)
    }

    /// Wraps an arbitrary symmetric matrix laid out like `like`.
    pub fn from_matrix(matrix: DMatrix<f64>, like: &TangentVector) -> Self {
        assert_eq!(matrix.nrows(), like.dim());
        Self {
            matrix,
            offsets: like.0.offsets.clone(),
        }
    }

    /// `⟨u, v⟩_G`.
    pub fn inner(&self, u: &TangentVector, v: &TangentVector) -> f64 {
        let (u, v) = (u.to_dvector(), v.to_dvector());
        u.dot(&(&self.matrix * v))
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    fn check_vector(&self, v: &TangentVector) -> Result<()> {
        if v.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "vector of dim {} against metric of dim {}",
                v.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `G(θ) = Σ_t μ(t) Σ_y π(y|t) s sᵀ` by enumeration.
pub fn fisher_exact(b: &Battery, theta: &Theta) -> Result<FisherMatrix> {
    let policy = Policy::new(b, theta)?;
    let d = theta.dim();
    let mut g = DMatrix::<f64>::zeros(d, d);
    let mut s = vec![0.0; b.num_outputs(0).max(2)];
    for t in 0..b.num_tasks() {
        let p = policy.probs(t);
        let off = theta.0.offsets[t];
        let k = p.len() - 1;
        s.resize(k, 0.0);
        for y in 0..p.len() {
            for (j, sj) in s.iter_mut().enumerate() {
                *sj = if y == j + 1 { 1.0 } else { 0.0 } - p[j + 1];
            }
            let w = b.weights()[t] * p[y];
            for a in 0..k {
                for c in 0..k {
                    g[(off + a, off + c)] += w * s[a] * s[c];
                }
            }
        }
    }
    Ok(FisherMatrix {
        matrix: g,
        offsets: theta.0.offsets.clone(),
    })
}

/// Empirical mean of `s sᵀ` over `n` generated interactions.
pub fn fisher_mc(b: &Battery, theta: &Theta, n: usize, rng: &mut Stream) -> Result<FisherMatrix> {
    let d = theta.dim();
    if n < d {
        return Err(Error::InvalidArgument(format!(
            "fisher_mc needs n >= dim ({n} < {d})"
        )));
    }
    let policy = Policy::new(b, theta)?;
    let batch = crate::gvu::generate(b, theta, n, rng)?;
    let mut g = DMatrix::<f64>::zeros(d, d);
    let mut s = Vec::new();
    for &i in &batch.interactions {
        let p = policy.probs(i.task);
        let off = theta.0.offsets[i.task];
        s.clear();
        s.extend((1..p.len()).map(|k| if i.output == k { 1.0 } else { 0.0 } - p[k]));
        for a in 0..s.len() {
            for c in 0..s.len() {
                g[(off + a, off + c)] += s[a] * s[c];
            }
        }
    }
    g /= n as f64;
    Ok(FisherMatrix {
        matrix: g,
        offsets: theta.0.offsets.clone(),
    })
}

/// `g* = ∇F(θ) = Σ_t μ(t) Σ_y π(y|t) S_t(y) s_θ(t, y)` by enumeration.
pub fn grad_capability_exact(b: &Battery, theta: &Theta) -> Result<TangentVector> {
    let policy = Policy::new(b, theta)?;
    let mut g = theta.zero_tangent();
    for i in b.interactions() {
        let w = b.weights()[i.task] * policy.prob(i) * b.score(i);
        if w != 0.0 {
            policy.add_score(&mut g, i, w);
        }
    }
    Ok(g)
}

/// Angle between `u` and `v` in the metric `g`, in `[0, π]`.
pub fn fisher_angle(g: &FisherMatrix, u: &TangentVector, v: &TangentVector) -> Result<f64> {
    g.check_vector(u)?;
    g.check_vector(v)?;
    let nu = g.inner(u, u).max(0.0).sqrt();
    let nv = g.inner(v, v).max(0.0).sqrt();
    for n in [nu, nv] {
        if n < MIN_METRIC_NORM {
            return Err(Error::DegenerateVector(n));
        }
    }
    Ok((g.inner(u, v) / (nu * nv)).clamp(-1.0, 1.0).acos())
}

/// Solves `(G + damping I) a = v`.
pub fn natural_gradient(
    g: &FisherMatrix,
    v: &TangentVector,
    damping: f64,
) -> Result<TangentVector> {
    g.check_vector(v)?;
    if !(damping >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "damping must be >= 0, got {damping}"
        )));
    }
    let d = g.dim();
    let m = &g.matrix + DMatrix::<f64>::identity(d, d) * damping;
    let eig = SymmetricEigen::new(m.clone());
    let lmin = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(lmin >= MIN_EIGENVALUE) {
        return Err(Error::SingularMetric(lmin));
    }
    let chol = m.clone().cholesky().ok_or(Error::SingularMetric(lmin))?;
    let rhs = v.to_dvector();
    let mut a = chol.solve(&rhs);
    // One round of iterative refinement.
    let r = &rhs - &m * &a;
    a += chol.solve(&r);
    Ok(TangentVector::from_vec_like(a.iter().copied().collect(), v))
}

/// `λ_max / λ_min` of a positive definite metric.
pub fn fisher_condition_number(g: &FisherMatrix) -> Result<f64> {
    let ev = g.eigenvalues();
    let (lmin, lmax) = (ev[0], ev[ev.len() - 1]);
    if !(lmin > 1e-14 * lmax) {
        return Err(Error::SingularMetric(lmin));
    }
    Ok(lmax / lmin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{capability_exact, simple_battery};

    fn bernoulli() -> Battery {
        simple_battery(&[vec![0.0, 1.0]], &[1.0]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let theta = Theta::from_blocks(vec![vec![0.0, 0.0, 0.0]]);
        assert_eq!(policy_probs(&theta, 0).unwrap(), vec![0.25; 4]);
        let p = policy_probs(&Theta::from_blocks(vec![vec![3f64.ln()]]), 0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = policy_probs(&Theta::from_blocks(vec![vec![40.0, 0.0]]), 0).unwrap();
        assert!(p[1] >= 1.0 - 1e-12);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(matches!(
            policy_probs(&theta, 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn bernoulli_score_values() {
        let b = bernoulli();
        let theta = Theta::zeros(&b);
        let s1 = score_function(&b, &theta, Interaction::new(0, 1)).unwrap();
        let s0 = score_function(&b, &theta, Interaction::new(0, 0)).unwrap();
        assert_eq!(s1.as_slice(), &[0.5]);
        assert_eq!(s0.as_slice(), &[-0.5]);
    }

    #[test]
    fn score_matches_finite_differences_of_log_prob() {
        let b = simple_battery(&[vec![0.0, 0.5, 1.0], vec![0.1, 0.2]], &[0.4, 0.6]).unwrap();
        let theta = Theta::from_blocks(vec![vec![0.3, -0.8], vec![1.1]]);
        let h = 1e-5;
        for i in b.interactions() {
            let s = score_function(&b, &theta, i).unwrap();
            for c in 0..theta.dim() {
                let mut up = theta.clone();
                up.as_mut_slice()[c] += h;
                let mut dn = theta.clone();
                dn.as_mut_slice()[c] -= h;
                let lp = |th: &Theta| policy_probs(th, i.task).unwrap()[i.output].ln();
                let fd = (lp(&up) - lp(&dn)) / (2.0 * h);
                assert!((fd - s.as_slice()[c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn score_is_local_to_its_block() {
        let b = simple_battery(
            &[vec![0.0, 1.0], vec![0.0, 1.0, 0.5], vec![0.3, 0.2]],
            &[0.3, 0.3, 0.4],
        )
        .unwrap();
        let theta = Theta::from_blocks(vec![vec![0.2], vec![-0.4, 0.9], vec![1.0]]);
        let s = score_function(&b, &theta, Interaction::new(2, 1)).unwrap();
        assert!(s.block(0).iter().chain(s.block(1)).all(|&v| v == 0.0));
        assert!(s.block(2)[0] != 0.0);
    }

    #[test]
    fn fisher_bernoulli() {
        let b = bernoulli();
        let g = fisher_exact(&b, &Theta::zeros(&b)).unwrap();
        assert!((g.matrix[(0, 0)] - 0.25).abs() < 1e-15);
        let theta = Theta::from_blocks(vec![vec![0.7]]);
        let p = policy_probs(&theta, 0).unwrap()[1];
        let g = fisher_exact(&b, &theta).unwrap();
        assert!((g.matrix[(0, 0)] - p * (1.0 - p)).abs() < 1e-15);
    }

    #[test]
    fn fisher_is_block_diagonal_and_weighted() {
        let b = simple_battery(&[vec![0.0, 1.0], vec![0.0, 1.0]], &[0.3, 0.7]).unwrap();
        let g = fisher_exact(&b, &Theta::zeros(&b)).unwrap();
        assert!((g.matrix[(0, 0)] - 0.3 * 0.25).abs() < 1e-15);
        assert!((g.matrix[(1, 1)] - 0.7 * 0.25).abs() < 1e-15);
        assert_eq!(g.matrix[(0, 1)], 0.0);
        assert_eq!(g.coordinate(1, 1), Some(1));
        assert_eq!(g.coordinate(1, 0), None);
    }

    #[test]
    fn fisher_mc_bernoulli() {
        let b = bernoulli();
        let theta = Theta::zeros(&b);
        let n = 1_000_000;
        let g = fisher_mc(&b, &theta, n, &mut Stream::new(5)).unwrap();
        // s² ≡ 0.25 for the uniform Bernoulli, so the estimate is exact.
        assert!((g.matrix[(0, 0)] - 0.25).abs() < 1e-12);
        let again = fisher_mc(&b, &theta, n, &mut Stream::new(5)).unwrap();
        assert_eq!(g, again);
        // Off-uniform: s² has nonzero variance.
        let theta = Theta::from_blocks(vec![vec![1.0]]);
        let exact = fisher_exact(&b, &theta).unwrap().matrix[(0, 0)];
        let p = policy_probs(&theta, 0).unwrap()[1];
        let m4 = p * (1.0 - p).powi(4) + (1.0 - p) * p.powi(4);
        let sd = ((m4 - exact * exact) / n as f64).sqrt();
        let est = fisher_mc(&b, &theta, n, &mut Stream::new(6))
            .unwrap()
            .matrix[(0, 0)];
        assert!((est - exact).abs() <= 4.0 * sd);
    }

    #[test]
    fn gradient_examples() {
        let b = bernoulli();
        let g = grad_capability_exact(&b, &Theta::zeros(&b)).unwrap();
        assert!((g.as_slice()[0] - 0.25).abs() < 1e-15);
        let h = 1e-5;
        let f = |x: f64| capability_exact(&b, &Theta::from_blocks(vec![vec![x]])).unwrap();
        assert!(((f(h) - f(-h)) / (2.0 * h) - 0.25).abs() < 1e-8);

        let sharp = Theta::from_blocks(vec![vec![40.0]]);
        assert!(grad_capability_exact(&b, &sharp).unwrap().norm() <= 1e-9);

        let flat = simple_battery(&[vec![0.4, 0.4, 0.4]], &[1.0]).unwrap();
        let g = grad_capability_exact(&flat, &Theta::from_blocks(vec![vec![0.3, -1.2]])).unwrap();
        assert!(g.max_abs() < 1e-16);
    }

    #[test]
    fn angle_examples() {
        let b = simple_battery(&[vec![0.0, 1.0, 0.5]], &[1.0]).unwrap();
        let g = fisher_exact(&b, &Theta::from_blocks(vec![vec![0.2, -0.3]])).unwrap();
        let u = TangentVector::from_blocks(vec![vec![1.0, 0.5]]);
        assert!(fisher_angle(&g, &u, &u).unwrap().abs() < 1e-7);
        assert!(
            (fisher_angle(&g, &u, &u.scaled(-1.0)).unwrap() - std::f64::consts::PI).abs() < 1e-7
        );
        // G-orthogonal complement of u: w = e2 - (⟨u,e2⟩_G / ⟨u,u⟩_G) u.
        let e2 = TangentVector::from_blocks(vec![vec![0.0, 1.0]]);
        let mut w = e2.clone();
        w.axpy(-g.inner(&u, &e2) / g.inner(&u, &u), &u);
        assert!((fisher_angle(&g, &u, &w).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let zero = TangentVector::from_blocks(vec![vec![0.0, 0.0]]);
        assert!(matches!(
            fisher_angle(&g, &u, &zero),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn natural_gradient_examples() {
        let v = TangentVector::from_blocks(vec![vec![1.0]]);
        let g = FisherMatrix::from_matrix(DMatrix::from_element(1, 1, 0.25), &v);
        assert!((natural_gradient(&g, &v, 0.0).unwrap().as_slice()[0] - 4.0).abs() < 1e-14);
        assert_eq!(
            natural_gradient(&g, &v.scaled(0.0), 0.0)
                .unwrap()
                .as_slice(),
            &[0.0]
        );
        let v3 = TangentVector::from_blocks(vec![vec![1.0, -2.0], vec![0.5]]);
        let id = FisherMatrix::from_matrix(DMatrix::identity(3, 3), &v3);
        assert_eq!(natural_gradient(&id, &v3, 0.0).unwrap(), v3);
        let sing = FisherMatrix::from_matrix(DMatrix::zeros(1, 1), &v);
        assert!(matches!(
            natural_gradient(&sing, &v, 0.0),
            Err(Error::SingularMetric(_))
        ));
        assert!(natural_gradient(&sing, &v, 1e-3).is_ok());
    }

    #[test]
    fn condition_numbers() {
        let v = TangentVector::from_blocks(vec![vec![0.0, 0.0]]);
        let id = FisherMatrix::from_matrix(DMatrix::identity(2, 2), &v);
        assert!((fisher_condition_number(&id).unwrap() - 1.0).abs() < 1e-14);
        let d = FisherMatrix::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.05])),
            &v,
        );
        assert!((fisher_condition_number(&d).unwrap() - 5.0).abs() < 1e-12);

        let b = simple_battery(&[vec![0.0, 0.5, 1.0]], &[1.0]).unwrap();
        let uniform =
            fisher_condition_number(&fisher_exact(&b, &Theta::zeros(&b)).unwrap()).unwrap();
        let peaked = Theta::from_blocks(vec![vec![12.0, 0.0]]);
        let collapsed = fisher_condition_number(&fisher_exact(&b, &peaked).unwrap()).unwrap();
        assert!(collapsed > uniform, "{collapsed} vs {uniform}");
    }

    #[test]
    fn theta_json_round_trip() {
        let theta = Theta::from_blocks(vec![vec![0.5, -1.0], vec![2.0]]);
        let text = serde_json::to_string(&theta).unwrap();
        assert_eq!(text, r#"{"logits":[[0.5,-1.0],[2.0]]}"#);
        let back: Theta = serde_json::from_str(&text).unwrap();
        assert_eq!(back, theta);
    }
}
