//! Small summary-statistics helpers shared by the estimators.

use serde::{Deserialize, Serialize};

/// A Monte Carlo mean together with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Sample mean and `sd / sqrt(n)` with the unbiased variance.
    ///
    /// Welford accumulation, so a constant sample yields exactly that constant
    /// with zero standard error.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        assert!(n >= 2, "need at least two samples");
        let mut m = 0.0;
        let mut m2 = 0.0;
        for (k, &x) in xs.iter().enumerate() {
            let d = x - m;
            m += d / (k + 1) as f64;
            m2 += d * (x - m);
        }
        let var = m2 / (n - 1) as f64;
        Self {
            mean: m,
            stderr: (var / n as f64).sqrt(),
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = mean(&lx);
    let my = mean(&ly);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Lower order statistic at 1-based index `ceil(q * n)`, clamped to `[1, n]`.
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.0)).collect();
        assert!((log_log_slope(&xs, &ys) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_of_constant_has_zero_stderr() {
        let e = Estimate::from_samples(&[2.5; 10]);
        assert_eq!(e.mean, 2.5);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn quantile_rule() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(lower_quantile(&xs, 0.1), 1.0);
        assert_eq!(lower_quantile(&xs, 0.15), 2.0);
        assert_eq!(lower_quantile(&xs, 0.9), 9.0);
        assert_eq!(lower_quantile(&xs, 1.0), 10.0);
        assert_eq!(lower_quantile(&xs, 0.0), 1.0);
    }
}
