//! Closed-form targets for the registered scenarios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub p: f64,
    pub k_star: f64,
    pub lambda_star: f64,
    pub residual: f64,
}

/// Scalar ergodic LQ problem `dX = (aX + u)dt + σ dW`, cost `qX² + ru²`:
/// `P` is the positive root of `P²/r − 2aP − q = 0`.
pub fn riccati_oracle(a: f64, q: f64, r: f64, sigma: f64) -> Result<RiccatiSolution> {
    let no_root = || Error::NoRiccatiRoot { a, q, r };
    if !(r > 0.0) || q < 0.0 || !(a < 0.0 || q > 0.0) {
        return Err(no_root());
    }
    let p = r * (a + (a * a + q / r).sqrt());
    if !(p >= 0.0) || !p.is_finite() {
        return Err(no_root());
    }
    let residual = p * p / r - 2.0 * a * p - q;
    if residual.abs() > 1e-12 * (1.0 + q + p * p / r) {
        return Err(no_root());
    }
    Ok(RiccatiSolution { p, k_star: p / r, lambda_star: sigma * sigma * p, residual })
}

/// Ergodic cost of the feedback `u = −Kx` in the scalar LQ problem:
/// the closed loop is OU with rate `K − a`.
pub fn lq_feedback_cost(a: f64, q: f64, r: f64, sigma: f64, gain: f64) -> Result<f64> {
    let rate = gain - a;
    if !(rate > 0.0) {
        return Err(Error::InvalidArgument(format!("closed loop with gain {gain} is not stable")));
    }
    Ok((q + r * gain * gain) * sigma * sigma / (2.0 * rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuMoments {
    pub mean: f64,
    pub variance: f64,
    pub stationary_variance: f64,
}

/// Law of `dX = −kX dt + σ dW` at time `t` from `x0`.
pub fn ou_oracle(k: f64, sigma: f64, x0: f64, t: f64) -> Result<OuMoments> {
    if !(k > 0.0) {
        return Err(Error::InvalidArgument("OU rate must be positive".into()));
    }
    let s2 = sigma * sigma;
    Ok(OuMoments {
        mean: x0 * (-k * t).exp(),
        variance: s2 * (-(-2.0 * k * t).exp_m1()) / (2.0 * k),
        stationary_variance: s2 / (2.0 * k),
    })
}

/// Total variation between the OU laws at `t` started from `x` and `y`.
pub fn ou_tv(k: f64, sigma: f64, x: f64, y: f64, t: f64) -> Result<f64> {
    let m = ou_oracle(k, sigma, 0.0, t)?;
    if x == y {
        return Ok(0.0);
    }
    if m.variance == 0.0 {
        return Ok(1.0);
    }
    let d = (x - y).abs() * (-k * t).exp();
    Ok(2.0 * normal_cdf(d / (2.0 * m.variance.sqrt())) - 1.0)
}

/// `sup_x |d/dx (1 − e^{−x²})| = sup 2|x|e^{−x²}`, attained where
/// `1 − 2x² = 0`.
pub fn bounded_cost_gradient_sup() -> f64 {
    let x = std::f64::consts::FRAC_1_SQRT_2;
    2.0 * x * (-x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn riccati_examples() {
        let s = riccati_oracle(-1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((s.p - (2f64.sqrt() - 1.0)).abs() < 1e-14);
        assert_eq!(s.k_star, s.p);
        assert_eq!(s.lambda_star, s.p);
        let z = riccati_oracle(-1.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!((z.p, z.k_star, z.lambda_star), (0.0, 0.0, 0.0));
        let s = riccati_oracle(-2.0, 4.0, 1.0, 1.0).unwrap();
        assert!((s.p - (8f64.sqrt() - 2.0)).abs() < 1e-14);
        assert!(riccati_oracle(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(riccati_oracle(-1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn optimal_feedback_cost_matches_riccati() {
        for (a, q, r, s) in [(-1.0, 1.0, 1.0, 1.0), (-2.0, 4.0, 1.0, 0.5), (0.5, 2.0, 3.0, 1.2)] {
            let o = riccati_oracle(a, q, r, s).unwrap();
            let l = lq_feedback_cost(a, q, r, s, o.k_star).unwrap();
            assert!((l - o.lambda_star).abs() < 1e-12, "{l} vs {}", o.lambda_star);
            // K* is the minimiser over gains.
            for dk in [-0.05, 0.05] {
                assert!(lq_feedback_cost(a, q, r, s, o.k_star + dk).unwrap() > l);
            }
        }
        assert!((lq_feedback_cost(-1.0, 1.0, 1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ou_examples() {
        assert_eq!(ou_oracle(1.0, 1.0, 0.0, 50.0).unwrap().stationary_variance, 0.5);
        assert!((ou_oracle(1.0, 1.0, 0.0, 50.0).unwrap().variance - 0.5).abs() < 1e-15);
        assert_eq!(ou_tv(1.0, 1.0, 0.7, 0.7, 1.0).unwrap(), 0.0);
        let tv = ou_tv(1.0, 1.0, 1.0, -1.0, 2.0).unwrap();
        assert!((tv - 0.153).abs() < 5e-4, "{tv}");
    }

    #[test]
    fn cost_gradient_sup_matches_grid_search() {
        let grid = (0..=400_000).map(|i| i as f64 * 1e-5).map(|x| 2.0 * x * (-x * x).exp()).fold(0.0, f64::max);
        let c = bounded_cost_gradient_sup();
        assert!((c - grid).abs() < 1e-9);
        assert!((c - (2.0 / std::f64::consts::E).sqrt()).abs() < 1e-15);
    }
}
