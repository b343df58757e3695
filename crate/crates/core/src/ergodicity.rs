//! Ergodicity diagnostics: semigroup gradient bounds via the
//! Bismut–Elworthy formula, irreducibility probes and coupling estimates of
//! total-variation decay.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::control::ControlLaw;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{check_ellipticity, ControlledDiffusion, GradientPolicy, SampleRegion, SINGULAR_CONDITION};
use crate::rng::{path_rng, substream};
use crate::simulate::{
    simulate_forward, simulate_tangent, terminal_states, InitialLaw, TimeGrid, BLOW_UP_NORM,
};
use crate::stats::{normal_cdf, wilson95, Estimate, Z95};

/// Bounded test function `ψ: ℝⁿ → ℝ`.
pub type TestFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// Named bounded test functions acting on the first coordinate, each with
/// `‖ψ‖₀ = 1`.
pub fn test_functions() -> Vec<(&'static str, fn(&[f64]) -> f64)> {
    fn tanh(x: &[f64]) -> f64 {
        x[0].tanh()
    }
    fn gauss(x: &[f64]) -> f64 {
        (-x[0] * x[0]).exp()
    }
    fn sin_clipped(x: &[f64]) -> f64 {
        x[0].clamp(-2.0, 2.0).sin()
    }
    vec![("tanh", tanh), ("exp(-x^2)", gauss), ("sin(clip(x))", sin_clipped)]
}

/// Constants entering the strong Feller estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FellerConstants {
    pub k: f64,
    pub omega: f64,
    /// Lower bound on the smallest singular value of σ.
    pub sigma_lo: f64,
}

impl FellerConstants {
    pub fn from_model(model: &ControlledDiffusion) -> Result<Self> {
        let c = &model.constants;
        Ok(FellerConstants {
            k: c.k.ok_or(Error::MissingConstant("k (dissipativity rate)"))?,
            omega: c.sigma_lipschitz.ok_or(Error::MissingConstant("omega (σ Lipschitz constant)"))?,
            sigma_lo: c.sigma_lo.ok_or(Error::MissingConstant("sigma_lo"))?,
        })
    }
}

/// `C_t = (σ̲⁻¹/t)·(∫₀ᵗ e^{(ω−k)s} ds)^{1/2}`; infinite for `t < 1e-6`.
pub fn feller_gradient_bound(c: &FellerConstants, t: f64) -> Result<f64> {
    if !(c.sigma_lo > 0.0) {
        return Err(Error::InvalidArgument("sigma_lo must be positive".into()));
    }
    if t < 1e-6 {
        return Ok(f64::INFINITY);
    }
    let d = c.omega - c.k;
    let integral = if d.abs() < 1e-12 { t } else { ((d * t).exp() - 1.0) / d };
    Ok(integral.sqrt() / (c.sigma_lo * t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub t: f64,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub estimate: Estimate,
    pub ci95: f64,
}

/// One Euler path with its tangent and Bismut–Elworthy weight
/// `Σ_i (σ⁻¹(t_i,X_i,u_i) Ṽ_i)ᵀ ΔW_i`, where `Ṽ_i = V_i + ∇ₓb V_i dt` is the
/// predicted tangent. The prediction keeps the weight adapted and makes the
/// sum exact for the Euler scheme under additive noise.
struct WeightedPath {
    x: Vec<f64>,
    v: Vec<f64>,
    weight: f64,
    u: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
    jb: Vec<f64>,
    js: Vec<f64>,
    pred: Vec<f64>,
    w: Vec<f64>,
    next: Vec<f64>,
}

impl WeightedPath {
    fn new(x: &[f64], h: &[f64], m: usize) -> Self {
        let n = x.len();
        WeightedPath {
            x: x.to_vec(),
            v: h.to_vec(),
            weight: 0.0,
            u: vec![0.0; m],
            b: vec![0.0; n],
            s: vec![0.0; n * n],
            jb: vec![0.0; n * n],
            js: vec![0.0; n * n * n],
            pred: vec![0.0; n],
            w: vec![0.0; n],
            next: vec![0.0; n],
        }
    }

    fn step(
        &mut self,
        model: &ControlledDiffusion,
        law: &ControlLaw,
        t: f64,
        dt: f64,
        dw: &[f64],
        policy: GradientPolicy,
        path: usize,
        step: usize,
    ) -> Result<()> {
        let n = self.x.len();
        law.eval_into(t, &self.x, &mut self.u);
        model.drift_into(t, &self.x, &self.u, &mut self.b);
        model.diffusion_into(t, &self.x, &self.u, &mut self.s);
        model.drift_jacobian_x(t, &self.x, &self.u, policy, &mut self.jb)?;
        model.diffusion_jacobian_x(t, &self.x, &self.u, policy, &mut self.js)?;
        let sv = linalg::singular_values(&self.s, n);
        let cond = sv[n - 1] / sv[0].max(1e-300);
        let singular = || Error::SingularDiffusion { t, x: self.x.clone(), cond };
        if !(cond <= SINGULAR_CONDITION) {
            return Err(singular());
        }
        let inv = linalg::inverse(&self.s, n).ok_or_else(singular)?;
        linalg::mat_vec(&self.jb, n, n, &self.v, &mut self.pred);
        for (p, v) in self.pred.iter_mut().zip(&self.v) {
            *p = v + *p * dt;
        }
        linalg::mat_vec(&inv, n, n, &self.pred, &mut self.w);
        self.weight += linalg::dot(&self.w, dw);
        for r in 0..n {
            let mut acc = self.pred[r];
            for c in 0..n {
                let sv: f64 = (0..n).map(|l| self.js[(r * n + c) * n + l] * self.v[l]).sum();
                acc += sv * dw[c];
            }
            self.next[r] = acc;
        }
        self.v.copy_from_slice(&self.next);
        let mut norm2 = 0.0;
        for r in 0..n {
            let noise: f64 = (0..n).map(|c| self.s[r * n + c] * dw[c]).sum();
            self.x[r] += self.b[r] * dt + noise;
            norm2 += self.x[r] * self.x[r];
        }
        if !(norm2.sqrt() <= BLOW_UP_NORM) {
            return Err(Error::BlowUp { path, step: step + 1, norm: norm2.sqrt() });
        }
        Ok(())
    }
}

/// Bismut–Elworthy estimate of `⟨h, Dₓ P_t ψ(x)⟩` from `n_paths`
/// antithetic pairs: each sample is
/// `(1/2t)·[(ψ(X⁺_t) − ψ̄)·I⁺ + (ψ(X⁻_t) − ψ̄)·I⁻]`, where `X⁻` is driven by
/// the negated increments and `I^±` are the stochastic weights.
///
/// Subtracting the sample mean `ψ̄` leaves the expectation unchanged (the
/// weights have mean zero). The linear part of `ψ` is removed with the
/// control variate `(X_t − X̄)·I/t − V_t`, whose mean vanishes for the
/// Euler scheme under additive noise; `ψ` itself is never differentiated.
#[allow(clippy::too_many_arguments)]
pub fn bismut_elworthy(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    psi: TestFn,
    t: f64,
    x: &[f64],
    h: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
    policy: GradientPolicy,
) -> Result<GradientEstimate> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("t must be positive, got {t}")));
    }
    if n_paths < 2 {
        return Err(Error::InvalidArgument("n_paths must be at least 2".into()));
    }
    if law.is_feedback() {
        return Err(Error::InvalidArgument(
            "the tangent process ignores ∂u/∂x; use a constant or open-loop control".into(),
        ));
    }
    let n = model.state_dim();
    if x.len() != n || h.len() != n {
        return Err(Error::Dimension("x and h must match the state dimension".into()));
    }
    let grid = TimeGrid::with_step(t, dt)?;
    let dt = grid.dt();
    let sq = dt.sqrt();
    let m = model.control_dim();
    let pairs: Vec<Result<[WeightedPath; 2]>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut plus = WeightedPath::new(x, h, m);
            let mut minus = WeightedPath::new(x, h, m);
            let mut dw = vec![0.0; n];
            let mut neg = vec![0.0; n];
            for i in 0..grid.n_steps {
                gaussian(&mut rng, &mut dw, sq);
                neg.iter_mut().zip(&dw).for_each(|(a, b)| *a = -b);
                let ti = grid.time(i);
                plus.step(model, law, ti, dt, &dw, policy, p, i)?;
                minus.step(model, law, ti, dt, &neg, policy, p, i)?;
            }
            Ok([plus, minus])
        })
        .collect();
    let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    let np = n_paths as f64;
    let psis: Vec<[f64; 2]> = pairs.iter().map(|q| [psi(&q[0].x), psi(&q[1].x)]).collect();
    let mean_psi = psis.iter().map(|v| v[0] + v[1]).sum::<f64>() / (2.0 * np);
    let mut mean_x = vec![0.0; n];
    for q in &pairs {
        for j in 0..n {
            mean_x[j] += (q[0].x[j] + q[1].x[j]) / (2.0 * np);
        }
    }
    let raw: Vec<f64> = pairs
        .iter()
        .zip(&psis)
        .map(|(q, v)| ((v[0] - mean_psi) * q[0].weight + (v[1] - mean_psi) * q[1].weight) / (2.0 * t))
        .collect();
    let controls: Vec<Vec<f64>> = pairs
        .iter()
        .map(|q| {
            (0..n)
                .map(|j| {
                    let be = ((q[0].x[j] - mean_x[j]) * q[0].weight + (q[1].x[j] - mean_x[j]) * q[1].weight) / (2.0 * t);
                    be - 0.5 * (q[0].v[j] + q[1].v[j])
                })
                .collect()
        })
        .collect();
    let beta = control_coefficients(&raw, &controls, n);
    let samples: Vec<f64> = raw
        .iter()
        .zip(&controls)
        .map(|(a, c)| a - linalg::dot(&beta, c))
        .collect();
    let estimate = Estimate::from_samples(&samples);
    Ok(GradientEstimate { t, x: x.to_vec(), h: h.to_vec(), ci95: estimate.ci95(), estimate })
}

/// Least-squares coefficients of `a` on the centred columns of `c`.
fn control_coefficients(a: &[f64], c: &[Vec<f64>], n: usize) -> Vec<f64> {
    let np = a.len() as f64;
    let ma = a.iter().sum::<f64>() / np;
    let mut mc = vec![0.0; n];
    for row in c {
        mc.iter_mut().zip(row).for_each(|(m, v)| *m += v / np);
    }
    let mut gram = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    for (row, av) in c.iter().zip(a) {
        for i in 0..n {
            rhs[i] += (row[i] - mc[i]) * (av - ma);
            for j in 0..n {
                gram[i * n + j] += (row[i] - mc[i]) * (row[j] - mc[j]);
            }
        }
    }
    match linalg::inverse(&gram, n) {
        Some(inv) => {
            let mut beta = vec![0.0; n];
            linalg::mat_vec(&inv, n, n, &rhs, &mut beta);
            beta
        }
        None => vec![0.0; n],
    }
}

/// `E ψ(X_t^x)` with its standard error, paths keyed by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_value(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    psi: TestFn,
    t: f64,
    x: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Estimate> {
    let grid = TimeGrid::with_step(t, dt)?;
    let xs = terminal_states(model, law, &grid, &InitialLaw::Point(x.to_vec()), n_paths, seed)?;
    let v: Vec<f64> = xs.iter().map(|x| psi(x)).collect();
    Ok(Estimate::from_samples(&v))
}

/// Central difference `(P_tψ(x+εh) − P_tψ(x−εh))/(2ε)` under common random
/// numbers, with the standard error of the paired differences.
#[allow(clippy::too_many_arguments)]
pub fn crn_finite_difference(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    psi: TestFn,
    t: f64,
    x: &[f64],
    h: &[f64],
    eps: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<GradientEstimate> {
    let grid = TimeGrid::with_step(t, dt)?;
    let xp: Vec<f64> = x.iter().zip(h).map(|(a, b)| a + eps * b).collect();
    let xm: Vec<f64> = x.iter().zip(h).map(|(a, b)| a - eps * b).collect();
    let up = terminal_states(model, law, &grid, &InitialLaw::Point(xp), n_paths, seed)?;
    let dn = terminal_states(model, law, &grid, &InitialLaw::Point(xm), n_paths, seed)?;
    let d: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (psi(a) - psi(b)) / (2.0 * eps)).collect();
    let estimate = Estimate::from_samples(&d);
    Ok(GradientEstimate { t, x: x.to_vec(), h: h.to_vec(), ci95: estimate.ci95(), estimate })
}

/// Comparison of the two gradient estimators and the analytic bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub psi: String,
    pub bismut_elworthy: GradientEstimate,
    pub finite_difference: GradientEstimate,
    pub joint_ci95: f64,
    pub agree: bool,
    pub bound: f64,
    pub within_bound: bool,
}

/// Compare Bismut–Elworthy with CRN finite differences for one `ψ` with
/// `‖ψ‖₀ ≤ psi_sup`, and check `|⟨h, DP_tψ⟩| ≤ C_t ‖h‖ ‖ψ‖₀` up to the CI.
#[allow(clippy::too_many_arguments)]
pub fn check_gradient(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    name: &str,
    psi: TestFn,
    psi_sup: f64,
    constants: &FellerConstants,
    t: f64,
    x: &[f64],
    h: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
    policy: GradientPolicy,
) -> Result<GradientCheck> {
    let be = bismut_elworthy(model, law, psi, t, x, h, n_paths, dt, seed, policy)?;
    let fd = crn_finite_difference(model, law, psi, t, x, h, 0.01, n_paths, dt, substream(seed, "fd"))?;
    let joint = crate::stats::joint_ci95(&be.estimate, &fd.estimate);
    let bound = feller_gradient_bound(constants, t)? * linalg::norm(h) * psi_sup;
    Ok(GradientCheck {
        psi: name.to_string(),
        agree: (be.estimate.mean - fd.estimate.mean).abs() <= joint,
        within_bound: be.estimate.mean.abs() - be.ci95 <= bound,
        bismut_elworthy: be,
        finite_difference: fd,
        joint_ci95: joint,
        bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub difference: Estimate,
    pub bound: f64,
    pub holds: bool,
}

/// `|P_tψ(x) − P_tψ(y)| ≤ C_t‖x−y‖‖ψ‖₀` on random pairs drawn from
/// `region`, each difference estimated under common random numbers. A pair
/// holds when the difference minus its CI is below the bound.
#[allow(clippy::too_many_arguments)]
pub fn check_semigroup_lipschitz(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    psi: TestFn,
    psi_sup: f64,
    constants: &FellerConstants,
    t: f64,
    region: &SampleRegion,
    n_pairs: usize,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<LipschitzPair>> {
    let c_t = feller_gradient_bound(constants, t)?;
    let grid = TimeGrid::with_step(t, dt)?;
    let mut rng = crate::rng::stream_rng(substream(seed, "pairs"));
    (0..n_pairs)
        .map(|j| {
            let x = region.sample_state(&mut rng);
            let y = region.sample_state(&mut rng);
            let s = substream(seed, &format!("pair{j}"));
            let xs = terminal_states(model, law, &grid, &InitialLaw::Point(x.clone()), n_paths, s)?;
            let ys = terminal_states(model, law, &grid, &InitialLaw::Point(y.clone()), n_paths, s)?;
            let d: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| psi(a) - psi(b)).collect();
            let difference = Estimate::from_samples(&d);
            let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let bound = c_t * dist * psi_sup;
            let holds = difference.mean.abs() - difference.ci95() <= bound;
            Ok(LipschitzPair { x, y, difference, bound, holds })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentBoundPoint {
    pub t: f64,
    pub mean_square: f64,
    pub std_err: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `E‖V^h(t)‖² ≤ e^{(ω−k)t}‖h‖²` at the requested times (up to 2 SE).
#[allow(clippy::too_many_arguments)]
pub fn check_tangent_moments(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    constants: &FellerConstants,
    x: &[f64],
    h: &[f64],
    times: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
    policy: GradientPolicy,
) -> Result<Vec<TangentBoundPoint>> {
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let grid = TimeGrid::with_step(t_max, dt)?;
    let ens = simulate_forward(model, law, &grid, n_paths, x, seed)?;
    let v = simulate_tangent(model, &ens, h, policy)?;
    let h2 = linalg::dot(h, h);
    Ok(times
        .iter()
        .map(|t| {
            let e = v.mean_square(grid.index_of(*t));
            let bound = ((constants.omega - constants.k) * t).exp() * h2;
            TangentBoundPoint { t: *t, mean_square: e.mean, std_err: e.std_err, bound, holds: e.mean - 2.0 * e.std_err <= bound }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HitVerdict {
    Detected,
    /// No hits: the probability is at most `upper_bound` (rule of three).
    Undetected { upper_bound: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrreducibilityReport {
    pub t: f64,
    pub target: Vec<f64>,
    pub radius: f64,
    pub hits: usize,
    pub n_paths: usize,
    pub p_hat: f64,
    pub wilson95: (f64, f64),
    pub verdict: HitVerdict,
    /// Gaussian moment-matched proxy for the hit probability.
    pub proxy_probability: f64,
    /// Paths needed to expect three hits at the proxy probability.
    pub paths_needed: Option<f64>,
}

/// Fraction of paths with `X_t ∈ B_r(z)`, refused when σ is degenerate on a
/// box around the start and target.
#[allow(clippy::too_many_arguments)]
pub fn irreducibility_probe(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    x0: &[f64],
    t: f64,
    target: &[f64],
    radius: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<IrreducibilityReport> {
    if !(t > 0.0) || !(radius > 0.0) {
        return Err(Error::InvalidArgument("t and radius must be positive".into()));
    }
    let lo: Vec<f64> = x0.iter().zip(target).map(|(a, b)| a.min(*b) - radius - 1.0).collect();
    let hi: Vec<f64> = x0.iter().zip(target).map(|(a, b)| a.max(*b) + radius + 1.0).collect();
    let m = model.control_dim();
    let ell = check_ellipticity(model, &SampleRegion::new(lo, hi, m).with_time(0.0, t), 256, substream(seed, "ellipticity"))?;
    if !ell.holds {
        return Err(Error::Ellipticity(format!(
            "diffusion degenerates near the probe region (min singular value {:e})",
            ell.min_singular_value
        )));
    }
    let grid = TimeGrid::with_step(t, dt)?;
    let xs = terminal_states(model, law, &grid, &InitialLaw::Point(x0.to_vec()), n_paths, seed)?;
    let hits = xs
        .iter()
        .filter(|x| x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < radius)
        .count();
    let p_hat = hits as f64 / n_paths as f64;
    let n = x0.len();
    let mut proxy = 1.0;
    for j in 0..n {
        let col: Vec<f64> = xs.iter().map(|x| x[j]).collect();
        let e = Estimate::from_samples(&col);
        let sd = (e.std_err * e.std_err * n_paths as f64).sqrt().max(1e-300);
        let half = radius / (n as f64).sqrt();
        proxy *= gaussian_interval((target[j] - half - e.mean) / sd, (target[j] + half - e.mean) / sd);
    }
    let (verdict, paths_needed) = if hits > 0 {
        (HitVerdict::Detected, None)
    } else {
        (HitVerdict::Undetected { upper_bound: 3.0 / n_paths as f64 }, (proxy > 0.0).then(|| 3.0 / proxy))
    };
    Ok(IrreducibilityReport {
        t,
        target: target.to_vec(),
        radius,
        hits,
        n_paths,
        p_hat,
        wilson95: wilson95(hits, n_paths),
        verdict,
        proxy_probability: proxy,
        paths_needed,
    })
}

/// Standard normal mass of `[a, b]`, taken from the nearer tail so that
/// far intervals do not cancel to zero.
fn gaussian_interval(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        normal_cdf(-a) - normal_cdf(-b)
    } else {
        normal_cdf(b) - normal_cdf(a)
    }
}

/// Kernel coupling used once both chains are in `B_R(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingKind {
    /// Mirror the Brownian increment of the second chain (one dimension).
    Reflection,
    /// Maximal coupling of the two Gaussian Euler kernels over the second
    /// half of the epoch.
    Maximal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    pub epochs: usize,
    pub epoch_length: f64,
    pub ball_radius: f64,
    pub n_pairs: usize,
    pub dt: f64,
    pub seed: u64,
    /// Time resolution of the reported curve.
    pub report_every: f64,
    pub kind: Option<CouplingKind>,
}

impl CouplingParams {
    /// `T̃ = 2/k` and `R` with stationary proxy mass `0.9` in `B_R(0)`, from
    /// the moment asymptote `c_hat = E‖X_∞‖²`.
    pub fn defaults(k: f64, c_hat: f64, n: usize, n_pairs: usize, seed: u64) -> Result<Self> {
        let chi = ChiSquared::new(n as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let ball_radius = (c_hat / n as f64 * chi.inverse_cdf(0.9)).sqrt();
        let epoch_length = 2.0 / k;
        Ok(CouplingParams {
            epochs: 5,
            epoch_length,
            ball_radius,
            n_pairs,
            dt: 0.01,
            seed,
            report_every: epoch_length / 4.0,
            kind: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub times: Vec<f64>,
    pub tv_hat: Vec<f64>,
    pub ci95: Vec<f64>,
    pub rho_hat: f64,
    pub c_hat: f64,
    pub r_squared: f64,
    pub fit_window: (f64, f64),
    pub attempts: usize,
    pub successes: usize,
    pub coupling_probability: f64,
    pub inconclusive: bool,
    pub kind: CouplingKind,
    pub params: CouplingParams,
}

impl TvFit {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,tv_hat,ci95\n");
        for ((t, v), c) in self.times.iter().zip(&self.tv_hat).zip(&self.ci95) {
            s.push_str(&format!("{t},{v},{c}\n"));
        }
        s
    }
}

struct PairOutcome {
    /// Coupling time, or `None` if never coupled.
    tau: Option<f64>,
    attempts: usize,
    successes: usize,
}

#[inline]
fn euler_step(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    t: f64,
    x: &mut [f64],
    dw: &[f64],
    dt: f64,
    buf: &mut (Vec<f64>, Vec<f64>, Vec<f64>),
) {
    let n = x.len();
    let (u, b, s) = buf;
    law.eval_into(t, x, u);
    model.drift_into(t, x, u, b);
    model.diffusion_into(t, x, u, s);
    for r in 0..n {
        let noise: f64 = (0..n).map(|c| s[r * n + c] * dw[c]).sum();
        x[r] += b[r] * dt + noise;
    }
}

fn gaussian(rng: &mut ChaCha8Rng, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        *v = scale * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Log-density (up to a shared constant) of `N(m, LLᵀ)` at `v`.
fn log_density(v: &[f64], m: &[f64], l: &[f64]) -> f64 {
    let n = v.len();
    let mut z = vec![0.0; n];
    let mut logdet = 0.0;
    for i in 0..n {
        let mut acc = v[i] - m[i];
        for j in 0..i {
            acc -= l[i * n + j] * z[j];
        }
        z[i] = acc / l[i * n + i];
        logdet += l[i * n + i].ln();
    }
    -0.5 * linalg::dot(&z, &z) - logdet
}

fn sample_gaussian(rng: &mut ChaCha8Rng, m: &[f64], l: &[f64]) -> Vec<f64> {
    let n = m.len();
    let mut g = vec![0.0; n];
    gaussian(rng, &mut g, 1.0);
    (0..n).map(|i| m[i] + (0..=i).map(|j| l[i * n + j] * g[j]).sum::<f64>()).collect()
}

/// One-step Euler kernel `N(x + b h, σσᵀ h)`: mean and Cholesky factor.
fn euler_kernel(model: &ControlledDiffusion, law: &ControlLaw, t: f64, x: &[f64], h: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let u = law.eval(t, x);
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * n];
    model.drift_into(t, x, &u, &mut b);
    model.diffusion_into(t, x, &u, &mut s);
    let mean: Vec<f64> = (0..n).map(|i| x[i] + b[i] * h).collect();
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = h * (0..n).map(|c| s[i * n + c] * s[j * n + c]).sum::<f64>();
        }
    }
    Some((mean, linalg::cholesky_lower(&cov, n)?))
}

/// Maximal coupling of `P = N(mp, Lp)` and `Q = N(mq, Lq)`: returns the two
/// draws and whether they coincide.
fn maximal_coupling(
    rng: &mut ChaCha8Rng,
    mp: &[f64],
    lp: &[f64],
    mq: &[f64],
    lq: &[f64],
) -> (Vec<f64>, Vec<f64>, bool) {
    let a = sample_gaussian(rng, mp, lp);
    let u: f64 = rng.gen_range(0.0..1.0);
    if u.ln() + log_density(&a, mp, lp) <= log_density(&a, mq, lq) {
        return (a.clone(), a, true);
    }
    for _ in 0..10_000 {
        let b = sample_gaussian(rng, mq, lq);
        let u: f64 = rng.gen_range(0.0..1.0);
        if u.ln() + log_density(&b, mq, lq) > log_density(&b, mp, lp) {
            return (a, b, false);
        }
    }
    let b = sample_gaussian(rng, mq, lq);
    (a, b, false)
}

#[allow(clippy::too_many_arguments)]
fn run_pair(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    x0: &[f64],
    y0: &[f64],
    p: &CouplingParams,
    kind: CouplingKind,
    steps_per_epoch: usize,
    pair: usize,
) -> PairOutcome {
    let n = x0.len();
    let m = model.control_dim();
    let dt = p.epoch_length / steps_per_epoch as f64;
    let mut rng = path_rng(p.seed, pair as u64);
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut out = PairOutcome { tau: None, attempts: 0, successes: 0 };
    if x == y {
        out.tau = Some(0.0);
        return out;
    }
    let mut buf = (vec![0.0; m], vec![0.0; n], vec![0.0; n * n]);
    let mut dw = vec![0.0; n];
    let mut dw2 = vec![0.0; n];
    let sq = dt.sqrt();
    let in_ball = |v: &[f64]| linalg::norm(v) < p.ball_radius;
    for epoch in 0..p.epochs {
        let t0 = epoch as f64 * p.epoch_length;
        let attempt = in_ball(&x) && in_ball(&y);
        if attempt {
            out.attempts += 1;
        }
        let half = steps_per_epoch / 2;
        let fine_steps = if attempt && kind == CouplingKind::Maximal { half } else { steps_per_epoch };
        for i in 0..fine_steps {
            let t = t0 + i as f64 * dt;
            gaussian(&mut rng, &mut dw, sq);
            if attempt && kind == CouplingKind::Reflection {
                let before = x[0] - y[0];
                dw2.iter_mut().zip(&dw).for_each(|(a, b)| *a = -b);
                euler_step(model, law, t, &mut x, &dw, dt, &mut buf);
                euler_step(model, law, t, &mut y, &dw2, dt, &mut buf);
                let after = x[0] - y[0];
                if before * after <= 0.0 {
                    out.successes += 1;
                    out.tau = Some(t + dt);
                    return out;
                }
            } else {
                gaussian(&mut rng, &mut dw2, sq);
                euler_step(model, law, t, &mut x, &dw, dt, &mut buf);
                euler_step(model, law, t, &mut y, &dw2, dt, &mut buf);
            }
            if !(linalg::norm(&x) <= BLOW_UP_NORM && linalg::norm(&y) <= BLOW_UP_NORM) {
                return out;
            }
        }
        if attempt && kind == CouplingKind::Maximal {
            let tm = t0 + half as f64 * dt;
            let h = p.epoch_length - half as f64 * dt;
            let (Some((mx, lx)), Some((my, ly))) =
                (euler_kernel(model, law, tm, &x, h), euler_kernel(model, law, tm, &y, h))
            else {
                continue;
            };
            let (a, b, same) = maximal_coupling(&mut rng, &mx, &lx, &my, &ly);
            x = a;
            y = b;
            if same {
                out.successes += 1;
                out.tau = Some(t0 + p.epoch_length);
                return out;
            }
        }
    }
    out
}

/// Coupling estimate of `t ↦ ‖P_t(x,·) − P_t(y,·)‖_TV` by
/// `P(chains not yet met by t)`, with an exponential fit on the window
/// `[epoch_length, epochs·epoch_length]`.
pub fn coupling_tv(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    x: &[f64],
    y: &[f64],
    params: &CouplingParams,
) -> Result<TvFit> {
    let n = model.state_dim();
    if x.len() != n || y.len() != n {
        return Err(Error::Dimension("coupling start points do not match state dimension".into()));
    }
    if params.epochs == 0 || !(params.epoch_length > 0.0) || !(params.ball_radius > 0.0) || params.n_pairs == 0 {
        return Err(Error::InvalidArgument("coupling needs positive epochs, epoch length, radius and pairs".into()));
    }
    let kind = params.kind.unwrap_or(if n == 1 { CouplingKind::Reflection } else { CouplingKind::Maximal });
    let steps_per_epoch = ((params.epoch_length / params.dt).round() as usize).max(2);
    let outcomes: Vec<PairOutcome> = (0..params.n_pairs)
        .into_par_iter()
        .map(|p| run_pair(model, law, x, y, params, kind, steps_per_epoch, p))
        .collect();
    let horizon = params.epochs as f64 * params.epoch_length;
    let n_report = ((horizon / params.report_every).round() as usize).max(1);
    let times: Vec<f64> = (0..=n_report).map(|j| horizon * j as f64 / n_report as f64).collect();
    let nf = params.n_pairs as f64;
    let tv_hat: Vec<f64> = times
        .iter()
        .map(|t| outcomes.iter().filter(|o| o.tau.is_none_or(|tau| tau > *t + 1e-12)).count() as f64 / nf)
        .collect();
    let ci95: Vec<f64> = tv_hat.iter().map(|p| Z95 * (p * (1.0 - p) / nf).sqrt()).collect();
    let attempts: usize = outcomes.iter().map(|o| o.attempts).sum();
    let successes: usize = outcomes.iter().map(|o| o.successes).sum();
    let coupling_probability = if attempts > 0 { successes as f64 / attempts as f64 } else { 0.0 };

    let window = (params.epoch_length.min(horizon), horizon);
    let (ts, ls): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&tv_hat)
        .filter(|(t, v)| **v > 0.0 && **t >= window.0 - 1e-12)
        .map(|(t, v)| (*t, v.ln()))
        .unzip();
    let (rho_hat, c_hat, r_squared) = if ts.len() >= 2 {
        let (icpt, slope, r2) = linalg::linear_fit(&ts, &ls);
        (-slope, icpt.exp(), r2)
    } else if x == y {
        (f64::INFINITY, 0.0, 1.0)
    } else {
        (0.0, 1.0, 0.0)
    };
    let inconclusive = x != y && (coupling_probability < 1e-4 || !(rho_hat > 0.0));
    Ok(TvFit {
        x: x.to_vec(),
        y: y.to_vec(),
        times,
        tv_hat,
        ci95,
        rho_hat,
        c_hat,
        r_squared,
        fit_window: window,
        attempts,
        successes,
        coupling_probability,
        inconclusive,
        kind,
        params: params.clone(),
    })
}

/// Fit of pair prefactors against `1 + ‖x‖² + ‖y‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefactorFit {
    pub rho: f64,
    pub weights: Vec<f64>,
    pub prefactors: Vec<f64>,
    /// `max_pair C_pair / (1 + ‖x‖² + ‖y‖²)`: the envelope constant.
    pub c_hat: f64,
    pub monotone: bool,
    pub r_squared: f64,
}

/// Common rate and per-pair prefactors from a pooled fit of `log tv_hat`
/// with one intercept per pair, over each fit's window.
pub fn fit_prefactor(fits: &[TvFit]) -> Result<PrefactorFit> {
    if fits.is_empty() {
        return Err(Error::InvalidArgument("no coupling fits".into()));
    }
    let points: Vec<Vec<(f64, f64)>> = fits
        .iter()
        .map(|f| {
            f.times
                .iter()
                .zip(&f.tv_hat)
                .filter(|(t, v)| **v > 0.0 && **t >= f.fit_window.0 - 1e-12 && **t <= f.fit_window.1 + 1e-12)
                .map(|(t, v)| (*t, v.ln()))
                .collect()
        })
        .collect();
    if points.iter().any(|p| p.len() < 2) {
        return Err(Error::NotConverged("coupling curve vanished inside the fit window".into()));
    }
    // Within-pair centring removes the intercepts from the slope estimate.
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for p in &points {
        let mt = p.iter().map(|q| q.0).sum::<f64>() / p.len() as f64;
        let ml = p.iter().map(|q| q.1).sum::<f64>() / p.len() as f64;
        for (t, l) in p {
            sxy += (t - mt) * (l - ml);
            sxx += (t - mt) * (t - mt);
        }
    }
    let rho = -sxy / sxx;
    let prefactors: Vec<f64> = points
        .iter()
        .map(|p| (p.iter().map(|(t, l)| l + rho * t).sum::<f64>() / p.len() as f64).exp())
        .collect();
    let weights: Vec<f64> = fits.iter().map(|f| 1.0 + linalg::dot(&f.x, &f.x) + linalg::dot(&f.y, &f.y)).collect();
    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by(|a, b| weights[*a].total_cmp(&weights[*b]));
    let monotone = order.windows(2).all(|w| prefactors[w[1]] >= prefactors[w[0]]);
    let r_squared = if fits.len() >= 2 { linalg::linear_fit(&weights, &prefactors).2 } else { 1.0 };
    let c_hat = prefactors.iter().zip(&weights).map(|(c, w)| c / w).fold(0.0, f64::max);
    Ok(PrefactorFit { rho, weights, prefactors, c_hat, monotone, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> ControlledDiffusion {
        ControlledDiffusion::builder("ou", 1, 1)
            .drift_1d(|_, x, _| -x)
            .diffusion_1d(|_, _, _| 1.0)
            .drift_x_1d(|_, _, _| -1.0)
            .diffusion_x_1d(|_, _, _| 0.0)
            .build()
            .unwrap()
    }

    #[test]
    fn feller_constant_values() {
        let c = FellerConstants { k: 1.0, omega: 0.0, sigma_lo: 1.0 };
        assert!((feller_gradient_bound(&c, 1.0).unwrap() - (1.0 - (-1f64).exp()).sqrt()).abs() < 1e-12);
        assert!(feller_gradient_bound(&c, 1e-8).unwrap().is_infinite());
        let eq = FellerConstants { k: 0.5, omega: 0.5, sigma_lo: 2.0 };
        assert!((feller_gradient_bound(&eq, 4.0).unwrap() - 0.5 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_constants_are_reported() {
        assert!(matches!(FellerConstants::from_model(&ou()), Err(Error::MissingConstant(_))));
    }

    #[test]
    fn constant_test_function_has_zero_gradient() {
        let g = bismut_elworthy(&ou(), &ControlLaw::zero(1), &|_| 3.0, 1.0, &[0.0], &[1.0], 2000, 0.01, 1, GradientPolicy::AnalyticOnly)
            .unwrap();
        assert_eq!(g.estimate.mean, 0.0);
    }

    #[test]
    fn bismut_elworthy_matches_euler_oracle() {
        // d/dx E tanh(X_1) for the Euler OU chain (dt = 0.01) from x = 0,
        // by Gauss–Hermite quadrature of the Gaussian terminal law.
        let oracle = 0.273_944_773_653_782_3;
        let psi = |x: &[f64]| x[0].tanh();
        let g = bismut_elworthy(&ou(), &ControlLaw::zero(1), &psi, 1.0, &[0.0], &[1.0], 20_000, 0.01, 5, GradientPolicy::AnalyticOnly)
            .unwrap();
        assert!((g.estimate.mean - oracle).abs() < g.ci95.max(1e-3), "{g:?}");
        let fd = crn_finite_difference(&ou(), &ControlLaw::zero(1), &psi, 1.0, &[0.0], &[1.0], 0.01, 20_000, 0.01, 5).unwrap();
        assert!((fd.estimate.mean - oracle).abs() < 2.0 * fd.ci95);
    }

    #[test]
    fn identical_starts_couple_immediately() {
        let p = CouplingParams::defaults(1.0, 0.5, 1, 200, 1).unwrap();
        let f = coupling_tv(&ou(), &ControlLaw::zero(1), &[0.3], &[0.3], &p).unwrap();
        assert!(f.tv_hat.iter().all(|v| *v == 0.0));
        assert!(!f.inconclusive);
    }

    #[test]
    fn maximal_coupling_of_identical_kernels_always_couples() {
        let mut rng = path_rng(4, 0);
        let l = [1.0, 0.0, 0.3, 0.8];
        for _ in 0..100 {
            assert!(maximal_coupling(&mut rng, &[0.0, 1.0], &l, &[0.0, 1.0], &l).2);
        }
    }

    #[test]
    fn maximal_coupling_rate_matches_gaussian_overlap() {
        // N(0,1) vs N(1,1): P(couple) = 1 - TV = 2Φ(-1/2).
        let mut rng = path_rng(8, 0);
        let n = 40_000;
        let hits = (0..n).filter(|_| maximal_coupling(&mut rng, &[0.0], &[1.0], &[1.0], &[1.0]).2).count();
        let want = 2.0 * normal_cdf(-0.5);
        assert!((hits as f64 / n as f64 - want).abs() < 0.01);
    }

    #[test]
    fn degenerate_diffusion_is_refused() {
        let m = ControlledDiffusion::builder("flat", 1, 1).drift_1d(|_, x, _| -x).build().unwrap();
        let r = irreducibility_probe(&m, &ControlLaw::zero(1), &[0.0], 1.0, &[0.0], 0.5, 100, 0.01, 1);
        assert!(matches!(r, Err(Error::Ellipticity(_))));
    }

    #[test]
    fn far_tail_gets_a_finite_path_count() {
        let r = irreducibility_probe(&ou(), &ControlLaw::zero(1), &[0.0], 1.0, &[6.0], 0.1, 1000, 0.01, 2).unwrap();
        assert!(matches!(r.verdict, HitVerdict::Undetected { .. }));
        assert!(r.proxy_probability > 0.0 && r.proxy_probability < 1e-12);
        assert!(r.paths_needed.unwrap() > 1e12);
        assert!((gaussian_interval(8.0, 9.0) - (normal_cdf(-8.0) - normal_cdf(-9.0))).abs() < 1e-30);
        assert_eq!(gaussian_interval(-1.0, 1.0), normal_cdf(1.0) - normal_cdf(-1.0));
    }

    #[test]
    fn bismut_elworthy_refuses_feedback() {
        let law = ControlLaw::linear_feedback_1d(0.5);
        let e = bismut_elworthy(&ou(), &law, &|x: &[f64]| x[0].tanh(), 1.0, &[0.0], &[1.0], 10, 0.1, 1, GradientPolicy::AnalyticOnly);
        assert!(matches!(e, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn chi_square_radius() {
        let p = CouplingParams::defaults(1.0, 0.5, 1, 10, 1).unwrap();
        // 0.9 quantile of χ²₁ is 1.6449².
        let want = (0.5f64 * 1.644_853_6 * 1.644_853_6).sqrt();
        assert!((p.ball_radius - want).abs() < 1e-4, "{} vs {want}", p.ball_radius);
        assert_eq!(p.epoch_length, 2.0);
    }
}
