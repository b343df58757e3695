//! Ergodic BSDE by vanishing discount, and the λ-identity check against
//! long-run simulated cost.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_backward_blocks, test_points, BsdeSolution, Design, Driver, RegressionBasis, SliceFit};
use crate::control::ControlLaw;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ControlledDiffusion;
use crate::rng::substream;
use crate::simulate::{long_run_average, simulate_checkpointed, InitialLaw, TimeGrid};
use crate::stats::{Estimate, Z95};

/// Scalar driver `L(t,x,u) − αy` of the discounted equation.
struct DiscountDriver<'a> {
    model: &'a ControlledDiffusion,
    alpha: f64,
}

impl Driver for DiscountDriver<'_> {
    fn y_dim(&self) -> usize {
        1
    }

    fn eval(&self, t: f64, x: &[f64], u: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = self.model.cost(t, x, u) - self.alpha * y[0];
        Ok(())
    }
}

/// Solver settings shared by the discounted and undiscounted solves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountParams {
    /// Truncation horizon; defaults to `8/α`.
    pub horizon: Option<f64>,
    pub dt: f64,
    pub n_paths: usize,
    /// Spatial basis of the per-slice regressions (any period is ignored).
    pub basis: RegressionBasis,
    pub seed: u64,
    /// Initial law of the regression ensemble; it should spread around `x_ref`.
    pub initial: InitialLaw,
    /// Steps per regenerated block of paths.
    pub block_len: usize,
    pub picard: usize,
    pub n_test: usize,
}

impl DiscountParams {
    pub fn new(x_ref: Vec<f64>, seed: u64) -> Self {
        DiscountParams {
            horizon: None,
            dt: 0.02,
            n_paths: 4000,
            basis: RegressionBasis::polynomial(3),
            seed,
            initial: InitialLaw::Gaussian { mean: x_ref, sd: 1.0 },
            block_len: 500,
            picard: 0,
            n_test: 200,
        }
    }
}

/// Slices of a backward solve collected for the pooled periodic regression.
#[derive(Default)]
struct PeriodSamples {
    ts: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

/// `Y^α(0,·)` on one truncated horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountedValue {
    pub alpha: f64,
    pub horizon: f64,
    pub x_ref: Vec<f64>,
    /// `Y^α(0, x_ref)` and its standard error, from the pathwise values.
    pub value_at_ref: f64,
    pub std_err: f64,
    /// Solution restricted to the first step.
    pub solution: BsdeSolution,
}

impl DiscountedValue {
    pub fn scaled(&self) -> (f64, f64) {
        (self.alpha * self.value_at_ref, self.alpha * self.std_err)
    }
}

fn plain_basis(basis: &RegressionBasis) -> RegressionBasis {
    RegressionBasis { period: None, ..basis.clone() }
}

/// Backward solve of `dY = −(L − αY)dt + Z dW` on `[0, T]` with `Y_T = 0`.
/// `alpha = 0` gives the undiscounted finite-horizon value.
fn solve_value(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    alpha: f64,
    horizon: f64,
    params: &DiscountParams,
    keep_until: f64,
    samples: Option<&mut PeriodSamples>,
) -> Result<BsdeSolution> {
    let grid = TimeGrid::with_step(horizon, params.dt)?;
    let paths = simulate_checkpointed(model, law, &grid, &params.initial, params.n_paths, params.seed, params.block_len)?;
    let driver = DiscountDriver { model, alpha };
    let basis = plain_basis(&params.basis);
    let mut get = |b: usize| paths.block(model, law, b).map(Cow::Owned);
    let mut observer = samples.map(|s| {
        move |t: f64, xs: &[f64], ys: &[f64]| {
            if t < keep_until - 1e-9 {
                s.ts.extend(std::iter::repeat_n(t, ys.len()));
                s.xs.extend_from_slice(xs);
                s.ys.extend_from_slice(ys);
            }
        }
    });
    let obs = observer.as_mut().map(|o| o as &mut dyn FnMut(f64, &[f64], &[f64]));
    let sol = solve_backward_blocks(&grid, paths.n_blocks(), &mut get, &driver, None, &basis, params.picard, true, obs)?;
    Ok(sol.restrict(grid.time(1)))
}

/// Discounted value `Y^α(0,·)` by LSMC with `Y_T = 0`, `T ≥ 8/α`.
pub fn solve_discounted(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    alpha: f64,
    x_ref: &[f64],
    params: &DiscountParams,
) -> Result<DiscountedValue> {
    discounted_with_samples(model, law, alpha, x_ref, params, None)
}

fn discounted_with_samples(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    alpha: f64,
    x_ref: &[f64],
    params: &DiscountParams,
    samples: Option<(&mut PeriodSamples, f64)>,
) -> Result<DiscountedValue> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("discount must be positive, got {alpha}")));
    }
    let horizon = params.horizon.unwrap_or(8.0 / alpha);
    if horizon < 8.0 / alpha - 1e-9 {
        return Err(Error::InvalidArgument(format!("horizon {horizon} below 8/alpha = {}", 8.0 / alpha)));
    }
    let (s, keep) = match samples {
        Some((s, k)) => (Some(s), k),
        None => (None, 0.0),
    };
    let solution = solve_value(model, law, alpha, horizon, params, keep, s)?;
    let (value_at_ref, std_err) = solution.pathwise_initial(x_ref, 0).expect("pathwise values requested");
    Ok(DiscountedValue { alpha, horizon, x_ref: x_ref.to_vec(), value_at_ref, std_err, solution })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    /// Envelope constant `max ‖v(x)‖/(1+‖x‖²)` over the test points.
    pub c_prime: f64,
    /// Least-squares slope and `r²` of `‖v‖` against `1+‖x‖²`.
    pub slope: f64,
    pub r_squared: f64,
    pub envelope_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicCheck {
    pub period: f64,
    pub resid_var_periodic: f64,
    pub resid_var_plain: f64,
    pub improved: bool,
}

/// Solution triple of the ergodic BSDE in Markovian form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicSolution {
    pub lambda_hat: f64,
    pub lambda_se: f64,
    pub lambda_ci95: f64,
    pub x_ref: Vec<f64>,
    pub alpha_schedule: Vec<f64>,
    /// `(α, α·Y^α(0,x_ref), standard error)` per discount.
    pub scaled_values: Vec<(f64, f64, f64)>,
    pub monotone: bool,
    pub inconclusive: bool,
    pub growth_fit: GrowthFit,
    pub periodic: Option<PeriodicCheck>,
    pub basis: RegressionBasis,
    /// Regression of `Y^{α_min}` at time 0 (or pooled over one period).
    pub v_fit: SliceFit,
    pub v_periodic: bool,
    pub v_offset: f64,
    pub state_dim: usize,
}

impl ErgodicSolution {
    fn raw_v(&self, t: f64, x: &[f64]) -> f64 {
        let basis = if self.v_periodic { self.basis.clone() } else { plain_basis(&self.basis) };
        let exps = basis.exponents(self.state_dim);
        let mut out = [0.0];
        self.v_fit.predict_into(&basis, &exps, t, x, &mut out);
        out[0]
    }

    /// Bias function `v(t mod T*, x)`, zero at `(0, x_ref)`.
    pub fn v_hat(&self, t: f64, x: &[f64]) -> f64 {
        self.raw_v(t, x) - self.v_offset
    }
}

/// `λ = lim α·Y^α(0,x_ref)` by linear extrapolation in α from the two
/// smallest discounts, with `v = Y^{α_min}(0,·) − Y^{α_min}(0,x_ref)`.
pub fn solve_ebsde(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    alpha_schedule: &[f64],
    x_ref: &[f64],
    params: &DiscountParams,
) -> Result<ErgodicSolution> {
    if alpha_schedule.len() < 3 {
        return Err(Error::InvalidArgument("alpha schedule needs at least three discounts".into()));
    }
    if !alpha_schedule.windows(2).all(|w| w[1] < w[0]) || !(alpha_schedule[alpha_schedule.len() - 1] > 0.0) {
        return Err(Error::InvalidArgument("alpha schedule must be positive and strictly decreasing".into()));
    }
    let n = model.state_dim();
    if x_ref.len() != n {
        return Err(Error::Dimension("x_ref does not match the state dimension".into()));
    }
    let period = model.period;
    let mut samples = PeriodSamples::default();
    let mut values = Vec::with_capacity(alpha_schedule.len());
    let last = alpha_schedule.len() - 1;
    for (j, alpha) in alpha_schedule.iter().enumerate() {
        let s = match period {
            Some(p) if j == last => Some((&mut samples, p)),
            _ => None,
        };
        let v = discounted_with_samples(model, law, *alpha, x_ref, params, s)?;
        log::info!("discount {alpha}: alpha*Y = {:.5} ± {:.1e}", v.scaled().0, v.scaled().1);
        values.push(v);
    }
    let scaled: Vec<(f64, f64, f64)> = values.iter().map(|v| (v.alpha, v.scaled().0, v.scaled().1)).collect();
    let (a1, y1, s1) = scaled[last - 1];
    let (a2, y2, s2) = scaled[last];
    let lambda_hat = (a1 * y2 - a2 * y1) / (a1 - a2);
    let lambda_se = ((a1 * s2).powi(2) + (a2 * s1).powi(2)).sqrt() / (a1 - a2);

    let mut up = false;
    let mut down = false;
    for w in scaled.windows(2) {
        let d = w[1].1 - w[0].1;
        let ci = Z95 * (w[0].2.powi(2) + w[1].2.powi(2)).sqrt();
        if d > ci {
            up = true;
        }
        if d < -ci {
            down = true;
        }
    }
    let monotone = !(up && down);

    let finest = values.pop().expect("schedule is non-empty");
    let mut v_fit = finest.solution.y_slices[0].clone();
    let mut v_periodic = false;
    let periodic = match period {
        Some(p) => {
            let check = pooled_period_fit(&samples, &params.basis, n, p)?;
            v_fit = check.1;
            v_periodic = true;
            Some(check.0)
        }
        None => None,
    };
    let mut sol = ErgodicSolution {
        lambda_hat,
        lambda_se,
        lambda_ci95: Z95 * lambda_se,
        x_ref: x_ref.to_vec(),
        alpha_schedule: alpha_schedule.to_vec(),
        scaled_values: scaled,
        monotone,
        inconclusive: !monotone,
        growth_fit: GrowthFit { c_prime: 0.0, slope: 0.0, r_squared: 0.0, envelope_holds: true },
        periodic,
        basis: match period {
            Some(p) => plain_basis(&params.basis).with_period(p),
            None => plain_basis(&params.basis),
        },
        v_fit,
        v_periodic,
        v_offset: 0.0,
        state_dim: n,
    };
    sol.v_offset = sol.raw_v(0.0, x_ref);

    let pts = test_points(&params.initial, params.n_test, substream(params.seed, "ebsde-test"));
    let (w, v): (Vec<f64>, Vec<f64>) = pts.iter().map(|x| (1.0 + linalg::dot(x, x), sol.v_hat(0.0, x).abs())).unzip();
    let c_prime = w.iter().zip(&v).map(|(w, v)| v / w).fold(0.0, f64::max);
    let (_, slope, r_squared) = linalg::linear_fit(&w, &v);
    sol.growth_fit = GrowthFit {
        c_prime,
        slope,
        r_squared,
        envelope_holds: w.iter().zip(&v).all(|(w, v)| *v <= c_prime * w * (1.0 + 1e-12)),
    };
    Ok(sol)
}

/// Pooled regression of the carried `Y` values over one period, with and
/// without the time-of-period features.
fn pooled_period_fit(s: &PeriodSamples, basis: &RegressionBasis, n: usize, period: f64) -> Result<(PeriodicCheck, SliceFit)> {
    if s.ys.is_empty() {
        return Err(Error::InvalidArgument("no slices collected within the period".into()));
    }
    let plain = plain_basis(basis);
    let with_t = plain.clone().with_period(period);
    let d_plain = Design::new(&plain, &plain.exponents(n), n, &s.xs, &s.ts);
    let (f_plain, _) = d_plain.fit(&s.ys, 1);
    let d_per = Design::new(&with_t, &with_t.exponents(n), n, &s.xs, &s.ts);
    let (f_per, _) = d_per.fit(&s.ys, 1);
    let check = PeriodicCheck {
        period,
        resid_var_periodic: f_per.resid_var[0],
        resid_var_plain: f_plain.resid_var[0],
        improved: f_per.resid_var[0] < f_plain.resid_var[0],
    };
    Ok((check, f_per))
}

/// One named estimate of λ with its 95% half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub name: String,
    pub value: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub a: String,
    pub b: String,
    pub gap: f64,
    /// Two joint 95% half-widths.
    pub tolerance: f64,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaConsistency {
    pub estimates: Vec<LambdaEstimate>,
    pub pairwise: Vec<PairGap>,
    /// Raw `Y^T_0(x₀)/T` before the bias correction.
    pub finite_horizon_raw: f64,
    pub x0_independence: PairGap,
    pub passed: bool,
}

impl LambdaConsistency {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("estimate,value,ci95\n");
        for e in &self.estimates {
            s.push_str(&format!("{},{},{}\n", e.name, e.value, e.ci95));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyParams {
    /// Dissipativity rate; the finite-horizon solve uses `T = 20/k`.
    pub k: f64,
    pub x0: Vec<f64>,
    /// Second start for the x₀-independence check.
    pub x0_alt: Vec<f64>,
    pub long_run_horizon: f64,
    pub burn_in: f64,
    pub long_run_paths: usize,
    pub solver: DiscountParams,
}

impl ConsistencyParams {
    pub fn new(k: f64, x0: Vec<f64>, solver: DiscountParams) -> Self {
        let x0_alt = x0.iter().map(|v| v + 2.0).collect();
        ConsistencyParams { k, x0, x0_alt, long_run_horizon: 100.0 / k, burn_in: 10.0 / k, long_run_paths: 1000, solver }
    }
}

fn pair(a: &LambdaEstimate, b: &LambdaEstimate) -> PairGap {
    let gap = (a.value - b.value).abs();
    let tolerance = 2.0 * (a.ci95 * a.ci95 + b.ci95 * b.ci95).sqrt();
    PairGap { a: a.name.clone(), b: b.name.clone(), gap, tolerance, agree: gap <= tolerance }
}

/// Compare the EBSDE λ, the long-run average and the finite-horizon value
/// per unit time, and check that the long-run average does not depend on
/// the start.
///
/// The finite-horizon value carries the bias `(v(x₀) − E v(X_T))/T`; it is
/// removed with the EBSDE bias function, `E v(X_T)` being averaged over the
/// solve's own terminal states.
pub fn check_lambda_consistency(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    sol: &ErgodicSolution,
    params: &ConsistencyParams,
) -> Result<LambdaConsistency> {
    if !(params.k > 0.0) {
        return Err(Error::MissingConstant("dissipativity rate k > 0"));
    }
    let sp = &params.solver;
    let lr = |x0: &[f64], name: &str| -> Result<LambdaEstimate> {
        let e = long_run_average(
            model,
            law,
            &InitialLaw::Point(x0.to_vec()),
            params.long_run_horizon,
            params.burn_in,
            sp.dt,
            params.long_run_paths,
            substream(sp.seed, name),
        )?;
        Ok(LambdaEstimate { name: name.into(), value: e.lambda_hat, ci95: e.ci95 })
    };
    let long_run = lr(&params.x0, "long-run")?;
    let long_run_alt = lr(&params.x0_alt, "long-run-alt")?;

    let horizon = 20.0 / params.k;
    let grid = TimeGrid::with_step(horizon, sp.dt)?;
    let fh_params = DiscountParams { seed: substream(sp.seed, "finite-horizon"), ..sp.clone() };
    let mut terminal = PeriodSamples::default();
    let fh = solve_value(model, law, 0.0, horizon, &fh_params, f64::INFINITY, None)?;
    {
        let paths = simulate_checkpointed(model, law, &grid, &fh_params.initial, fh_params.n_paths, fh_params.seed, fh_params.block_len)?;
        let last = paths.block(model, law, paths.n_blocks() - 1)?;
        for p in 0..last.n_paths {
            terminal.xs.extend_from_slice(last.terminal(p));
        }
    }
    let n = model.state_dim();
    let t_end = grid.time(grid.n_steps);
    let v_end: Vec<f64> = terminal.xs.chunks(n).map(|x| sol.v_hat(t_end, x)).collect();
    let v_end = Estimate::from_samples(&v_end);
    let (raw, raw_se) = fh.pathwise_initial(&params.x0, 0).expect("pathwise values requested");
    let corrected = (raw - sol.v_hat(0.0, &params.x0) + v_end.mean) / horizon;
    let finite = LambdaEstimate {
        name: "finite-horizon".into(),
        value: corrected,
        ci95: Z95 * (raw_se * raw_se + v_end.std_err * v_end.std_err).sqrt() / horizon,
    };
    let ebsde = LambdaEstimate { name: "ebsde".into(), value: sol.lambda_hat, ci95: sol.lambda_ci95 };
    let pairwise = vec![pair(&ebsde, &long_run), pair(&ebsde, &finite), pair(&long_run, &finite)];
    let x0_independence = pair(&long_run, &long_run_alt);
    let passed = pairwise.iter().all(|p| p.agree) && x0_independence.agree;
    Ok(LambdaConsistency {
        estimates: vec![ebsde, long_run, finite, long_run_alt],
        pairwise,
        finite_horizon_raw: raw / horizon,
        x0_independence,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou_quadratic() -> ControlledDiffusion {
        ControlledDiffusion::builder("ou-quadratic", 1, 1)
            .drift_1d(|_, x, _| -x)
            .diffusion_1d(|_, _, _| 1.0)
            .cost_1d(|_, x, _| x * x)
            .build()
            .unwrap()
    }

    fn constant_cost() -> ControlledDiffusion {
        ControlledDiffusion::builder("unit", 1, 1)
            .drift_1d(|_, x, _| -x)
            .diffusion_1d(|_, _, _| 1.0)
            .cost_1d(|_, _, _| 1.0)
            .build()
            .unwrap()
    }

    fn small(seed: u64) -> DiscountParams {
        DiscountParams { n_paths: 1000, dt: 0.05, block_len: 100, ..DiscountParams::new(vec![0.0], seed) }
    }

    #[test]
    fn constant_cost_discounted_value_is_exact() {
        let v = solve_discounted(&constant_cost(), &ControlLaw::zero(1), 0.5, &[0.0], &small(1)).unwrap();
        let want = (1.0 - (-0.5f64 * v.horizon).exp()) / 0.5;
        assert!((v.value_at_ref - want).abs() < 1e-3 * want, "{} vs {want}", v.value_at_ref);
    }

    #[test]
    fn constant_cost_has_unit_lambda_and_no_bias() {
        let s = solve_ebsde(&constant_cost(), &ControlLaw::zero(1), &[0.4, 0.2, 0.1], &[0.0], &small(2)).unwrap();
        assert!((s.lambda_hat - 1.0).abs() < 1e-3, "{}", s.lambda_hat);
        assert_eq!(s.v_hat(0.0, &[0.0]), 0.0);
        assert!(s.v_hat(0.0, &[1.5]).abs() < 1e-6);
    }

    #[test]
    fn short_horizon_is_rejected() {
        let p = DiscountParams { horizon: Some(5.0), ..small(3) };
        assert!(matches!(solve_discounted(&constant_cost(), &ControlLaw::zero(1), 1.0, &[0.0], &p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn schedule_must_decrease() {
        let r = solve_ebsde(&constant_cost(), &ControlLaw::zero(1), &[0.1, 0.2, 0.4], &[0.0], &small(4));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn large_discount_sees_local_cost() {
        // α·Y^α(0,0) = E∫αe^{−αs}X_s² ds ≈ 1/(2+α) for OU from 0.
        let p = DiscountParams { dt: 0.005, ..small(5) };
        let v = solve_discounted(&ou_quadratic(), &ControlLaw::zero(1), 10.0, &[0.0], &p).unwrap();
        let want = 1.0 / 12.0;
        assert!((v.scaled().0 - want).abs() < 0.2 * want, "{:?}", v.scaled());
    }

    #[test]
    fn reference_point_is_the_zero_of_v() {
        let s = solve_ebsde(&ou_quadratic(), &ControlLaw::zero(1), &[0.8, 0.4, 0.2], &[0.5], &small(6)).unwrap();
        assert_eq!(s.v_hat(0.0, &[0.5]), 0.0);
        assert!(s.growth_fit.envelope_holds);
    }
}
