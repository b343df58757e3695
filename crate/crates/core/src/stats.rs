//! Monte Carlo summary statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// 97.5% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Mean with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, std_err: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Estimate { mean, std_err: (var / n as f64).sqrt(), n }
    }

    /// Half-width of the 95% normal confidence interval.
    pub fn ci95(&self) -> f64 {
        Z95 * self.std_err
    }
}

/// Half-width of the 95% interval for the difference of two independent
/// estimates.
pub fn joint_ci95(a: &Estimate, b: &Estimate) -> f64 {
    Z95 * (a.std_err * a.std_err + b.std_err * b.std_err).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

/// Wilson score interval at 95% for `hits` successes out of `n`.
pub fn wilson95(hits: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = hits as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_constant_has_zero_error() {
        let e = Estimate::from_samples(&[2.0; 10]);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.std_err, 0.0);
    }

    #[test]
    fn wilson_contains_proportion() {
        let (lo, hi) = wilson95(683, 1000);
        assert!(lo < 0.683 && 0.683 < hi);
        let (lo0, hi0) = wilson95(0, 10_000);
        assert_eq!(lo0, 0.0);
        assert!(hi0 < 4.0e-4);
    }

    #[test]
    fn quantile_inverts_cdf() {
        assert!((normal_cdf(normal_quantile(0.975)) - 0.975).abs() < 1e-8);
        assert!((normal_quantile(0.975) - Z95).abs() < 1e-7);
    }
}
