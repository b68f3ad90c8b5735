//! Estimators for the update decomposition `ĝ = ρ g* + ξ_G + ξ_V + b`, the
//! variance inequality and its step-size window, slop mass, and Goodhart
//! drift.
//!
//! Replica loops run on rayon. Replica `r` always reads stream `r` of a base
//! stream split off the caller's generator, and results are collected in
//! replica order, so every estimate is independent of the thread count.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::{capability_exact, Battery};
use crate::gvu::{
    generate_with, potential, reinforce_with, UpdaterSpec, VerifierKind, VerifierSpec,
};
use crate::manifold::{
    fisher_angle, fisher_exact, grad_capability_exact, Policy, TangentVector, Theta,
};
use crate::rng::Stream;
use crate::stats::{lower_quantile, Estimate};
use crate::{Error, Result};

/// Stand-in for an infinite signal-to-noise ratio.
pub const SNR_INFINITE: f64 = f64::MAX;
/// Below this `‖g*‖` the alignment coefficient is undefined.
pub const MIN_GRADIENT_NORM: f64 = 1e-10;
pub const MIN_REPLICAS: usize = 30;
pub const CURVATURE_SAFETY: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub rho: f64,
    pub sigma_g2: f64,
    pub sigma_v2: f64,
    pub bias_norm: f64,
    pub g_star_norm2: f64,
    pub snr_g: f64,
    pub snr_v: f64,
    pub fisher_angle: f64,
    pub replicas: u64,
}

/// A [`DecompositionReport`] plus the replica statistics behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub report: DecompositionReport,
    /// Standard error of `rho` over replicas.
    pub rho_stderr: f64,
    /// `v̄`, the replica mean of `ĝ`.
    pub mean_update: TangentVector,
    pub g_star: TangentVector,
}

fn snr(signal: f64, noise: f64) -> f64 {
    if noise > 0.0 {
        signal / noise
    } else {
        SNR_INFINITE
    }
}

/// Splits a fresh base stream off `rng` so that consecutive calls differ.
fn replica_base(rng: &mut Stream) -> Stream {
    let label = rng.next_u64();
    rng.child(label)
}

/// Paired replica estimate of the decomposition for the REINFORCE estimator.
///
/// Each replica draws one batch and scores it twice, with `vspec` and with
/// the oracle, so `σ²_V = mean ‖ĝ_V − ĝ_oracle‖²` is exactly zero when
/// `vspec` is the oracle. `σ²_G` is the unbiased sample variance of the
/// oracle estimates. `ρ` and the bias use the chart inner product; the angle
/// between `v̄` and `g*` is measured in the Fisher metric and reported as
/// `π/2` when `v̄` has zero Fisher norm.
pub fn decompose(
    b: &Battery,
    theta: &Theta,
    vspec: &VerifierSpec,
    n: usize,
    replicas: usize,
    rng: &mut Stream,
) -> Result<Decomposition> {
    if replicas < MIN_REPLICAS {
        return Err(Error::InvalidArgument(format!(
            "decompose needs at least {MIN_REPLICAS} replicas, got {replicas}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    vspec.validate()?;
    let g_star = grad_capability_exact(b, theta)?;
    let g2 = g_star.norm2();
    if g2.sqrt() < MIN_GRADIENT_NORM {
        return Err(Error::DegenerateGradient(g2.sqrt()));
    }
    let policy = Policy::new(b, theta)?;
    let base = replica_base(rng);
    let oracle = VerifierSpec::oracle();
    let pairs: Vec<(TangentVector, TangentVector)> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut s = base.child(r);
            let batch = generate_with(b, &policy, n, &mut s);
            let vo = potential(&oracle, b, theta, &batch, &mut s)?;
            let vv = potential(vspec, b, theta, &batch, &mut s)?;
            Ok((
                reinforce_with(&policy, theta, &batch, &vo),
                reinforce_with(&policy, theta, &batch, &vv),
            ))
        })
        .collect::<Result<_>>()?;

    let inv = 1.0 / replicas as f64;
    let mut mean_o = theta.zero_tangent();
    let mut mean_v = theta.zero_tangent();
    for (o, v) in &pairs {
        mean_o.axpy(inv, o);
        mean_v.axpy(inv, v);
    }
    let sigma_g2 = pairs
        .iter()
        .map(|(o, _)| o.sub(&mean_o).norm2())
        .sum::<f64>()
        / (replicas - 1) as f64;
    let sigma_v2 = pairs.iter().map(|(o, v)| v.sub(o).norm2()).sum::<f64>() * inv;
    let rhos: Vec<f64> = pairs.iter().map(|(_, v)| g_star.dot(v) / g2).collect();
    let rho_est = Estimate::from_samples(&rhos);
    let rho = g_star.dot(&mean_v) / g2;
    let bias_norm = mean_v.sub(&g_star.scaled(rho)).norm();
    let metric = fisher_exact(b, theta)?;
    let angle = match fisher_angle(&metric, &mean_v, &g_star) {
        Ok(a) => a,
        Err(Error::DegenerateVector(_)) => std::f64::consts::FRAC_PI_2,
        Err(e) => return Err(e),
    };
    Ok(Decomposition {
        report: DecompositionReport {
            rho,
            sigma_g2,
            sigma_v2,
            bias_norm,
            g_star_norm2: g2,
            snr_g: snr(g2, sigma_g2),
            snr_v: snr(g2, sigma_v2),
            fisher_angle: angle,
            replicas: replicas as u64,
        },
        rho_stderr: rho_est.stderr,
        mean_update: mean_v,
        g_star,
    })
}

/// Largest step for which the variance inequality can hold:
/// `2ρ‖g*‖² / (L (ρ²‖g*‖² + σ²_G + σ²_V))`.
pub fn eta_max(rho: f64, g_star_norm2: f64, sigma_g2: f64, sigma_v2: f64, l: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::NonPositiveAlignment(rho));
    }
    if !(l > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "curvature bound must be > 0, got {l}"
        )));
    }
    Ok(2.0 * rho * g_star_norm2 / (l * (rho * rho * g_star_norm2 + sigma_g2 + sigma_v2)))
}

/// Verifier SNR needed for the inequality at step `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrThreshold {
    Value(f64),
    Unattainable,
}

impl Serialize for SnrThreshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Value(v) => s.serialize_f64(*v),
            Self::Unattainable => s.serialize_str("unattainable"),
        }
    }
}

impl<'de> Deserialize<'de> for SnrThreshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Self::Value(v)),
            Raw::Text(t) if t == "unattainable" => Ok(Self::Unattainable),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad snr_v_star `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Zero when `ρ ≤ 0`: no positive step satisfies the inequality.
    pub eta_max: f64,
    pub snr_v_star: SnrThreshold,
    #[serde(rename = "L")]
    pub curvature: f64,
    /// `η (lhs − rhs)`, the guaranteed lower bound on `E[ΔF]`.
    pub gain_bound: f64,
}

/// Evaluates `ρ‖g*‖² > (ηL/2)(ρ²‖g*‖² + σ²_G + σ²_V)`.
pub fn check_inequality(
    rho: f64,
    g_star_norm2: f64,
    sigma_g2: f64,
    sigma_v2: f64,
    l: f64,
    eta: f64,
) -> InequalityReport {
    let lhs = rho * g_star_norm2;
    let rhs = 0.5 * eta * l * (rho * rho * g_star_norm2 + sigma_g2 + sigma_v2);
    let eta_max = eta_max(rho, g_star_norm2, sigma_g2, sigma_v2, l).unwrap_or(0.0);
    let snr_v_star = if rho > 0.0 {
        snr_v_star(rho, snr(g_star_norm2, sigma_g2), l, eta)
    } else {
        SnrThreshold::Unattainable
    };
    InequalityReport {
        lhs,
        rhs,
        holds: lhs > rhs,
        eta_max,
        snr_v_star,
        curvature: l,
        gain_bound: eta * (lhs - rhs),
    }
}

/// `1 / (2ρ₀/(ηL) − ρ₀² − 1/SNR_G)`, or unattainable when that denominator
/// is not positive.
pub fn snr_v_star(rho0: f64, snr_g: f64, l: f64, eta: f64) -> SnrThreshold {
    let denom = 2.0 * rho0 / (eta * l) - rho0 * rho0 - 1.0 / snr_g;
    if denom > 0.0 {
        SnrThreshold::Value(1.0 / denom)
    } else {
        SnrThreshold::Unattainable
    }
}

/// Safety factor times the largest `|uᵀ H u|` over `probes` random unit
/// directions, with `H` the Hessian of the exact capability estimated by
/// central second differences at step `radius`.
pub fn estimate_curvature(
    b: &Battery,
    theta: &Theta,
    probes: usize,
    radius: f64,
    rng: &mut Stream,
) -> Result<f64> {
    if probes < 8 {
        return Err(Error::InvalidArgument(format!(
            "need at least 8 probes, got {probes}"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be > 0, got {radius}"
        )));
    }
    let f0 = capability_exact(b, theta)?;
    let d = theta.dim();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        u.iter_mut().for_each(|x| *x /= norm);
        let dir = TangentVector::from_vec_like(u, &theta.zero_tangent());
        let fp = capability_exact(b, &theta.step(&dir, radius)?)?;
        let fm = capability_exact(b, &theta.step(&dir, -radius)?)?;
        worst = worst.max(((fp - 2.0 * f0 + fm) / (radius * radius)).abs());
    }
    Ok(CURVATURE_SAFETY * worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopReport {
    pub v_hi: f64,
    pub s_lo: f64,
    pub slop_mass: f64,
    pub alpha: f64,
    pub beta_q: f64,
    pub n: u64,
}

/// Fraction of `n` sampled interactions the verifier puts in its top-`alpha`
/// set while the battery puts them in its bottom-`beta_q` set.
pub fn slop(
    b: &Battery,
    theta: &Theta,
    vspec: &VerifierSpec,
    alpha: f64,
    beta_q: f64,
    n: usize,
    rng: &mut Stream,
) -> Result<SlopReport> {
    for (name, q) in [("alpha", alpha), ("beta_q", beta_q)] {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} must lie in (0, 1], got {q}"
            )));
        }
    }
    if n < 100 {
        return Err(Error::InvalidArgument(format!(
            "slop needs n >= 100, got {n}"
        )));
    }
    let policy = Policy::new(b, theta)?;
    let batch = generate_with(b, &policy, n, rng);
    let v = potential(vspec, b, theta, &batch, rng)?;
    let s: Vec<f64> = batch.interactions.iter().map(|&i| b.score(i)).collect();
    let sorted = |xs: &[f64]| {
        let mut out = xs.to_vec();
        out.sort_by(f64::total_cmp);
        out
    };
    let v_hi = lower_quantile(&sorted(&v), 1.0 - alpha);
    let s_lo = lower_quantile(&sorted(&s), beta_q);
    let hits = v
        .iter()
        .zip(&s)
        .filter(|(vi, si)| **vi >= v_hi && **si <= s_lo)
        .count();
    Ok(SlopReport {
        v_hi,
        s_lo,
        slop_mass: hits as f64 / n as f64,
        alpha,
        beta_q,
        n: n as u64,
    })
}

/// `c ← max(0, c − γ ‖Δθ‖)`.
pub fn goodhart_decay(c: f64, gamma: f64, step_norm: f64) -> f64 {
    (c - gamma * step_norm).max(0.0)
}

/// Applies [`goodhart_decay`] to a goodhart verifier in place; other kinds
/// are left alone.
pub fn decay_verifier(spec: &mut VerifierSpec, step_norm: f64) {
    if let VerifierKind::Goodhart {
        gamma, alignment, ..
    } = &mut spec.kind
    {
        *alignment = goodhart_decay(*alignment, *gamma, step_norm);
    }
}

/// Small-ρ threshold `ηL(σ²_G + σ²_V) / (2‖g*‖²)` below which the expected
/// gain turns negative.
pub fn rho_crit(eta: f64, l: f64, sigma_g2: f64, sigma_v2: f64, g_star_norm2: f64) -> Result<f64> {
    if !(g_star_norm2 > 0.0) {
        return Err(Error::DegenerateGradient(g_star_norm2.max(0.0).sqrt()));
    }
    Ok(eta * l * (sigma_g2 + sigma_v2) / (2.0 * g_star_norm2))
}

/// Replica mean of the exact one-step capability change `F(θ') − F(θ)`
/// under a REINFORCE update with batch size `n`.
pub fn measure_gain(
    b: &Battery,
    theta: &Theta,
    vspec: &VerifierSpec,
    uspec: &UpdaterSpec,
    n: usize,
    replicas: usize,
    rng: &mut Stream,
) -> Result<Estimate> {
    if replicas < 2 || n == 0 {
        return Err(Error::InvalidArgument(
            "measure_gain needs replicas >= 2 and n >= 1".into(),
        ));
    }
    uspec.validate()?;
    vspec.validate()?;
    let f0 = capability_exact(b, theta)?;
    let policy = Policy::new(b, theta)?;
    let base = replica_base(rng);
    let gains: Vec<f64> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut s = base.child(r);
            let batch = generate_with(b, &policy, n, &mut s);
            let v = potential(vspec, b, theta, &batch, &mut s)?;
            let g = reinforce_with(&policy, theta, &batch, &v);
            Ok(capability_exact(b, &theta.step(&g, uspec.eta)?)? - f0)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&gains))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::simple_battery;
    use crate::gvu::VerifierKind;

    fn bernoulli() -> Battery {
        simple_battery(&[vec![0.0, 1.0]], &[1.0]).unwrap()
    }

    fn three_task() -> (Battery, Theta) {
        let b = simple_battery(
            &[
                vec![0.1, 0.9, 0.4],
                vec![0.7, 0.2],
                vec![0.0, 0.5, 1.0, 0.3],
            ],
            &[0.5, 0.2, 0.3],
        )
        .unwrap();
        let theta = Theta::from_blocks(vec![vec![0.3, -0.2], vec![0.5], vec![-0.4, 0.1, 0.7]]);
        (b, theta)
    }

    #[test]
    fn oracle_decomposition() {
        let (b, theta) = three_task();
        let d = decompose(
            &b,
            &theta,
            &VerifierSpec::oracle(),
            16,
            2000,
            &mut Stream::new(1),
        )
        .unwrap();
        assert!(
            (d.report.rho - 1.0).abs() <= 4.0 * d.rho_stderr,
            "{:?}",
            d.report
        );
        assert!(d.report.sigma_v2 <= 1e-12);
        assert_eq!(d.report.snr_v, SNR_INFINITE);
        assert!(
            (d.report.snr_g - d.report.g_star_norm2 / d.report.sigma_g2).abs()
                <= 1e-12 * d.report.snr_g
        );
    }

    #[test]
    fn constant_decomposition_has_no_alignment() {
        let (b, theta) = three_task();
        let c = VerifierSpec::new(
            VerifierKind::Constant {
                value: 2.0,
                tau: 0.0,
            },
            1.0,
        )
        .unwrap();
        let d = decompose(&b, &theta, &c, 16, 2000, &mut Stream::new(2)).unwrap();
        assert!(d.report.rho.abs() <= 4.0 * d.rho_stderr, "{:?}", d.report);
    }

    #[test]
    fn decompose_is_deterministic_and_validates() {
        let (b, theta) = three_task();
        let noisy = VerifierSpec::new(VerifierKind::Noisy { tau: 0.3 }, 1.0).unwrap();
        let a = decompose(&b, &theta, &noisy, 8, 50, &mut Stream::new(3)).unwrap();
        let c = decompose(&b, &theta, &noisy, 8, 50, &mut Stream::new(3)).unwrap();
        assert_eq!(a, c);
        assert!(decompose(&b, &theta, &noisy, 8, 29, &mut Stream::new(3)).is_err());
        let flat = simple_battery(&[vec![0.5, 0.5]], &[1.0]).unwrap();
        assert!(matches!(
            decompose(
                &flat,
                &Theta::zeros(&flat),
                &noisy,
                8,
                50,
                &mut Stream::new(3)
            ),
            Err(Error::DegenerateGradient(_))
        ));
    }

    #[test]
    fn eta_max_examples() {
        assert_eq!(eta_max(1.0, 1.0, 0.0, 0.0, 1.0).unwrap(), 2.0);
        assert!((eta_max(0.5, 1.0, 0.375, 0.375, 2.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(
            eta_max(1.0, 1.0, 0.3, 0.1, 1.0).unwrap() < eta_max(1.0, 1.0, 0.3, 0.025, 1.0).unwrap()
        );
        assert!(matches!(
            eta_max(0.0, 1.0, 0.0, 0.0, 1.0),
            Err(Error::NonPositiveAlignment(_))
        ));
    }

    #[test]
    fn inequality_examples() {
        let r = check_inequality(1.0, 1.0, 0.0, 0.0, 1.0, 0.1);
        assert_eq!((r.lhs, r.rhs, r.holds), (1.0, 0.05, true));
        let em = eta_max(0.5, 1.0, 0.375, 0.375, 2.0).unwrap();
        let r = check_inequality(0.5, 1.0, 0.375, 0.375, 2.0, em);
        assert_eq!(r.lhs, r.rhs);
        assert!(!r.holds);
        for eta in [1e-6, 0.1, 10.0] {
            assert!(!check_inequality(0.0, 1.0, 0.1, 0.1, 1.0, eta).holds);
        }
    }

    #[test]
    fn snr_threshold_examples() {
        assert_eq!(
            snr_v_star(1.0, SNR_INFINITE, 1.0, 1.0),
            SnrThreshold::Value(1.0)
        );
        match snr_v_star(0.5, 4.0, 1.0, 0.5) {
            SnrThreshold::Value(v) => assert!((v - 2.0 / 3.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert_eq!(snr_v_star(1.0, 4.0, 1.0, 3.0), SnrThreshold::Unattainable);
        let text = serde_json::to_string(&SnrThreshold::Unattainable).unwrap();
        assert_eq!(
            serde_json::from_str::<SnrThreshold>(&text).unwrap(),
            SnrThreshold::Unattainable
        );
    }

    #[test]
    fn curvature_examples() {
        let flat = simple_battery(&[vec![0.4, 0.4, 0.4]], &[1.0]).unwrap();
        let l =
            estimate_curvature(&flat, &Theta::zeros(&flat), 8, 1e-3, &mut Stream::new(1)).unwrap();
        assert!(l <= 1e-6);

        let b = bernoulli();
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let exact = (p * (1.0 - p) * (1.0 - 2.0 * p)).abs();
        let l = estimate_curvature(
            &b,
            &Theta::from_blocks(vec![vec![1.0]]),
            8,
            1e-3,
            &mut Stream::new(1),
        )
        .unwrap();
        assert!((l / (1.5 * exact) - 1.0).abs() < 0.05, "{l}");

        let shrunk = simple_battery(&[vec![0.0, 0.25]], &[1.0]).unwrap();
        let ls = estimate_curvature(
            &shrunk,
            &Theta::from_blocks(vec![vec![1.0]]),
            8,
            1e-3,
            &mut Stream::new(1),
        )
        .unwrap();
        assert!(ls <= l);
    }

    fn levels_battery() -> Battery {
        let scores: Vec<Vec<f64>> = (0..4)
            .map(|t| (0..5).map(|k| (t * 5 + k) as f64 / 19.0).collect())
            .collect();
        simple_battery(&scores, &[0.25; 4]).unwrap()
    }

    #[test]
    fn oracle_slop_is_small() {
        let b = levels_battery();
        let r = slop(
            &b,
            &Theta::zeros(&b),
            &VerifierSpec::oracle(),
            0.1,
            0.1,
            10_000,
            &mut Stream::new(5),
        )
        .unwrap();
        assert!(r.slop_mass <= 0.02, "{r:?}");
    }

    #[test]
    fn vacuous_alpha_gives_lower_tail() {
        let b = levels_battery();
        let noisy = VerifierSpec::new(
            VerifierKind::Constant {
                value: 0.0,
                tau: 1.0,
            },
            1.0,
        )
        .unwrap();
        let n = 10_000;
        let r = slop(
            &b,
            &Theta::zeros(&b),
            &noisy,
            1.0,
            0.1,
            n,
            &mut Stream::new(6),
        )
        .unwrap();
        // Scores sit on 20 equally likely atoms, so the β = 0.1 tail holds two of them.
        assert!(
            (r.slop_mass - 0.1).abs() <= 2.0 / (n as f64).sqrt(),
            "{r:?}"
        );
    }

    #[test]
    fn goodhart_decay_examples() {
        assert_eq!(goodhart_decay(0.8, 0.0, 5.0), 0.8);
        assert!((goodhart_decay(1.0, 1.0, 0.3) - 0.7).abs() < 1e-15);
        assert_eq!(goodhart_decay(0.1, 1.0, 0.5), 0.0);
        let mut spec = VerifierSpec::new(
            VerifierKind::Goodhart {
                gamma: 1.0,
                junk_seed: 0,
                alignment: 1.0,
            },
            1.0,
        )
        .unwrap();
        decay_verifier(&mut spec, 0.25);
        assert_eq!(spec.alignment(), Some(0.75));
    }

    #[test]
    fn rho_crit_examples() {
        assert_eq!(rho_crit(0.1, 1.0, 0.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((rho_crit(0.1, 1.0, 1.5, 0.5, 1.0).unwrap() - 0.1).abs() < 1e-15);
        let a = rho_crit(0.1, 2.0, 0.3, 0.2, 0.7).unwrap();
        assert!((rho_crit(0.2, 2.0, 0.3, 0.2, 0.7).unwrap() - 2.0 * a).abs() < 1e-15);
        assert!(rho_crit(0.1, 1.0, 0.3, 0.2, 0.0).is_err());
    }

    #[test]
    fn small_oracle_steps_improve() {
        let b = bernoulli();
        let theta = Theta::from_blocks(vec![vec![-0.5]]);
        let gain = measure_gain(
            &b,
            &theta,
            &VerifierSpec::oracle(),
            &UpdaterSpec::reinforce(0.05),
            8,
            1000,
            &mut Stream::new(9),
        )
        .unwrap();
        assert!(gain.mean > 0.0);
    }
}
