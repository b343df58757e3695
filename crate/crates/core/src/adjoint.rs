//! Backward least-squares Monte Carlo for the adjoint BSDE
//! `dY = -∇ₓH(t,X,u,Y,Z) dt + Z dW`, and its infinite-horizon limit by
//! horizon truncation.
//!
//! Conditional expectations are global polynomial regressions on each time
//! slice. The scheme is explicit: the driver is evaluated at `(Y_{i+1}, Z_i)`.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::ControlLaw;
use crate::error::{Error, Result};
use crate::hamiltonian::{grad_h_x_into, HamiltonianWork};
use crate::linalg;
use crate::model::{ControlledDiffusion, GradientPolicy};
use crate::rng::{path_rng, substream};
use crate::simulate::{simulate_checkpointed, InitialLaw, PathEnsemble, TimeGrid};

/// Gram matrices with condition number above this are ridge-regularized.
pub const RIDGE_CONDITION: f64 = 1e8;

/// Polynomial basis in the (per-slice standardized) state, optionally
/// multiplied by `{1, cos(2πt/T*), sin(2πt/T*)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub period: Option<f64>,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3, period: None }
    }
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        RegressionBasis { degree, period: None }
    }

    pub fn with_period(mut self, period: f64) -> Self {
        self.period = Some(period);
        self
    }

    /// Exponent vectors of all monomials of total degree ≤ `degree`,
    /// constant first.
    pub fn exponents(&self, n: usize) -> Vec<Vec<u32>> {
        fn rec(n: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if cur.len() == n {
                out.push(cur.clone());
                return;
            }
            for e in 0..=left {
                cur.push(e);
                rec(n, left - e, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(n, self.degree as u32, &mut Vec::new(), &mut out);
        out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
        out
    }

    pub fn n_features(&self, n: usize) -> usize {
        let spatial = self.exponents(n).len();
        if self.period.is_some() {
            3 * spatial
        } else {
            spatial
        }
    }

    fn features(&self, exps: &[Vec<u32>], t: f64, z: &[f64], out: &mut [f64]) {
        let s = exps.len();
        for (k, e) in exps.iter().enumerate() {
            out[k] = e.iter().zip(z).map(|(p, v)| v.powi(*p as i32)).product();
        }
        if let Some(p) = self.period {
            let w = 2.0 * std::f64::consts::PI * t / p;
            let (sn, cs) = w.sin_cos();
            for k in 0..s {
                out[s + k] = out[k] * cs;
                out[2 * s + k] = out[k] * sn;
            }
        }
    }
}

/// Least-squares fit of a `k`-vector response on one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceFit {
    pub outputs: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `p × outputs`, row-major.
    pub coef: Vec<f64>,
    /// `(ΦᵀΦ + ridge)⁻¹`, `p × p`.
    pub inv_gram: Vec<f64>,
    pub resid_var: Vec<f64>,
    pub condition: f64,
    pub ridge: f64,
}

impl SliceFit {
    fn features(&self, basis: &RegressionBasis, exps: &[Vec<u32>], t: f64, x: &[f64], phi: &mut [f64]) {
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        basis.features(exps, t, &z, phi);
    }

    pub fn predict_into(&self, basis: &RegressionBasis, exps: &[Vec<u32>], t: f64, x: &[f64], out: &mut [f64]) {
        let p = self.coef.len() / self.outputs;
        let mut phi = vec![0.0; p];
        self.features(basis, exps, t, x, &mut phi);
        for (o, v) in out.iter_mut().enumerate() {
            *v = (0..p).map(|j| phi[j] * self.coef[j * self.outputs + o]).sum();
        }
    }

    /// Standard error of the fitted conditional mean of output `o` at `x`.
    pub fn prediction_se(&self, basis: &RegressionBasis, exps: &[Vec<u32>], t: f64, x: &[f64], o: usize) -> f64 {
        let p = self.coef.len() / self.outputs;
        let mut phi = vec![0.0; p];
        self.features(basis, exps, t, x, &mut phi);
        let mut q = 0.0;
        for a in 0..p {
            for b in 0..p {
                q += phi[a] * self.inv_gram[a * p + b] * phi[b];
            }
        }
        (q.max(0.0) * self.resid_var[o]).sqrt()
    }
}

/// Design matrix shared by all regressions on one slice.
pub(crate) struct Design {
    pub phi: Vec<f64>,
    pub n_obs: usize,
    pub p: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    inv_gram: Vec<f64>,
    condition: f64,
    ridge: f64,
}

impl Design {
    /// `xs` holds `n_obs` states of dimension `n`; `ts` their times.
    pub fn new(basis: &RegressionBasis, exps: &[Vec<u32>], n: usize, xs: &[f64], ts: &[f64]) -> Self {
        let n_obs = xs.len() / n;
        let nf = n_obs as f64;
        let mut mean = vec![0.0; n];
        for r in 0..n_obs {
            for j in 0..n {
                mean[j] += xs[r * n + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut scale = vec![0.0; n];
        for r in 0..n_obs {
            for j in 0..n {
                scale[j] += (xs[r * n + j] - mean[j]).powi(2);
            }
        }
        let mut degenerate = vec![false; n];
        for j in 0..n {
            let sd = (scale[j] / nf).sqrt();
            degenerate[j] = !(sd > 1e-12 * (1.0 + mean[j].abs()));
            scale[j] = if degenerate[j] { 1.0 } else { sd };
        }
        let p = basis.n_features(n);
        let mut phi = vec![0.0; n_obs * p];
        let mut z = vec![0.0; n];
        for r in 0..n_obs {
            for j in 0..n {
                z[j] = if degenerate[j] { 0.0 } else { (xs[r * n + j] - mean[j]) / scale[j] };
            }
            basis.features(exps, ts[r], &z, &mut phi[r * p..(r + 1) * p]);
        }
        let mut g = vec![0.0; p * p];
        for r in 0..n_obs {
            let row = &phi[r * p..(r + 1) * p];
            for a in 0..p {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..p {
                    g[a * p + b] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                g[a * p + b] = g[b * p + a];
            }
        }
        let normed: Vec<f64> = g.iter().map(|v| v / nf).collect();
        let eig = linalg::symmetric_eigenvalues(&normed, p);
        let lmax = eig[p - 1].max(1e-300);
        let lmin = eig[0];
        let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        let ridge = if condition > RIDGE_CONDITION { lmax * nf / RIDGE_CONDITION } else { 0.0 };
        for a in 0..p {
            g[a * p + a] += ridge;
        }
        let mut eye = vec![0.0; p * p];
        for a in 0..p {
            eye[a * p + a] = 1.0;
        }
        let inv_gram = linalg::solve_spd(&g, p, &eye, p);
        Design { phi, n_obs, p, mean, scale, inv_gram, condition, ridge }
    }

    /// Fit `ys` (`n_obs × k`). Returns the fit and the in-sample fitted values.
    pub fn fit(&self, ys: &[f64], k: usize) -> (SliceFit, Vec<f64>) {
        let p = self.p;
        let mut rhs = vec![0.0; p * k];
        for r in 0..self.n_obs {
            let row = &self.phi[r * p..(r + 1) * p];
            for a in 0..p {
                if row[a] == 0.0 {
                    continue;
                }
                for o in 0..k {
                    rhs[a * k + o] += row[a] * ys[r * k + o];
                }
            }
        }
        let mut coef = vec![0.0; p * k];
        for a in 0..p {
            for b in 0..p {
                let g = self.inv_gram[a * p + b];
                for o in 0..k {
                    coef[a * k + o] += g * rhs[b * k + o];
                }
            }
        }
        let mut fitted = vec![0.0; self.n_obs * k];
        let mut rss = vec![0.0; k];
        for r in 0..self.n_obs {
            let row = &self.phi[r * p..(r + 1) * p];
            for o in 0..k {
                let v: f64 = (0..p).map(|a| row[a] * coef[a * k + o]).sum();
                fitted[r * k + o] = v;
                rss[o] += (ys[r * k + o] - v).powi(2);
            }
        }
        let dof = (self.n_obs as f64 - p as f64).max(1.0);
        let fit = SliceFit {
            outputs: k,
            mean: self.mean.clone(),
            scale: self.scale.clone(),
            coef,
            inv_gram: self.inv_gram.clone(),
            resid_var: rss.into_iter().map(|v| v / dof).collect(),
            condition: self.condition,
            ridge: self.ridge,
        };
        (fit, fitted)
    }
}

/// Driver `f` of a backward equation `Y_i = E[Y_{i+1} + f(t_i, X_i, u_i, Y_{i+1}, Z_i) dt | X_i]`.
pub trait Driver: Sync {
    fn y_dim(&self) -> usize;
    #[allow(clippy::too_many_arguments)]
    fn eval(&self, t: f64, x: &[f64], u: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) -> Result<()>;
}

/// `∇ₓH(t, x, u, y, z)`.
pub struct AdjointDriver<'a> {
    pub model: &'a ControlledDiffusion,
    pub policy: GradientPolicy,
}

impl Driver for AdjointDriver<'_> {
    fn y_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn eval(&self, t: f64, x: &[f64], u: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
        let mut w = HamiltonianWork::new(self.model.state_dim(), self.model.control_dim());
        grad_h_x_into(self.model, t, x, u, y, z, self.policy, &mut w, out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauchyPoint {
    pub horizon: f64,
    pub next_horizon: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub skipped: bool,
    pub reason: Option<String>,
    pub bound: Option<f64>,
    pub sup_norm: f64,
    pub witness: Option<(f64, Vec<f64>)>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BsdeDiagnostics {
    /// Horizon of the backward solve the slices come from.
    pub horizon: f64,
    pub cauchy_history: Vec<CauchyPoint>,
    /// Fitted slope of `log Δ_j` against `T_j`.
    pub decay_slope: Option<f64>,
    /// `-2k`.
    pub expected_slope: Option<f64>,
    pub slope_consistent: Option<bool>,
    pub strictly_decreasing: Option<bool>,
    pub bound_check: Option<BoundReport>,
    pub ridge_slices: usize,
    pub max_condition: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Slice-wise regression representation of `(Y, Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub basis: RegressionBasis,
    pub state_dim: usize,
    pub y_dim: usize,
    /// `n_steps + 1` fits.
    pub y_slices: Vec<SliceFit>,
    /// `n_steps` fits of the `y_dim × n` integrand.
    pub z_slices: Vec<SliceFit>,
    pub diagnostics: BsdeDiagnostics,
    /// Slice-0 regression of the pathwise carried values, when requested.
    #[serde(default)]
    pub pathwise_y0: Option<SliceFit>,
    #[serde(skip)]
    exps: Vec<Vec<u32>>,
}

impl BsdeSolution {
    fn exps(&self) -> std::borrow::Cow<'_, [Vec<u32>]> {
        if self.exps.is_empty() {
            std::borrow::Cow::Owned(self.basis.exponents(self.state_dim))
        } else {
            std::borrow::Cow::Borrowed(&self.exps)
        }
    }

    /// Restore cached data after deserialization.
    pub fn rehydrate(mut self) -> Self {
        self.exps = self.basis.exponents(self.state_dim);
        self
    }

    fn check_time(&self, t: f64) -> Result<usize> {
        let tol = 1e-9 * (1.0 + self.grid.t_end.abs());
        if t < self.grid.t_start - tol || t > self.grid.t_end + tol {
            return Err(Error::HorizonOutOfRange { requested: t, max: self.grid.t_end });
        }
        Ok(self.grid.index_of(t))
    }

    pub fn y_at_slice(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.y_dim];
        self.y_slices[i].predict_into(&self.basis, &self.exps(), self.grid.time(i), x, &mut out);
        out
    }

    pub fn z_at_slice(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let i = i.min(self.z_slices.len().saturating_sub(1));
        let mut out = vec![0.0; self.y_dim * self.state_dim];
        self.z_slices[i].predict_into(&self.basis, &self.exps(), self.grid.time(i), x, &mut out);
        out
    }

    /// `Y(t, x)` at the nearest grid slice.
    pub fn evaluate_y(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let i = self.check_time(t)?;
        Ok(self.y_at_slice(i, x))
    }

    /// `Z(t, x)`, row-major `y_dim × n`.
    pub fn evaluate_z(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let i = self.check_time(t)?;
        Ok(self.z_at_slice(i, x))
    }

    /// Regression standard error of `Y_o(t, x)`.
    pub fn y_standard_error(&self, t: f64, x: &[f64], o: usize) -> Result<f64> {
        let i = self.check_time(t)?;
        Ok(self.y_slices[i].prediction_se(&self.basis, &self.exps(), self.grid.time(i), x, o))
    }

    /// `Y_o(t_start, x)` and its standard error from the pathwise values,
    /// whose spread includes the noise of every later step.
    pub fn pathwise_initial(&self, x: &[f64], o: usize) -> Option<(f64, f64)> {
        let fit = self.pathwise_y0.as_ref()?;
        let t = self.grid.t_start;
        let mut out = vec![0.0; self.y_dim];
        fit.predict_into(&self.basis, &self.exps(), t, x, &mut out);
        Some((out[o], fit.prediction_se(&self.basis, &self.exps(), t, x, o)))
    }

    /// Keep slices on `[t_start, t_end]` only.
    pub fn restrict(mut self, t_end: f64) -> Self {
        let i = self.grid.index_of(t_end).max(1);
        self.grid = TimeGrid { t_start: self.grid.t_start, t_end: self.grid.time(i), n_steps: i };
        self.y_slices.truncate(i + 1);
        self.z_slices.truncate(i);
        self
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// CSV of `Y(t, x)` on the supplied points.
    pub fn write_y_csv(&self, path: &Path, t: f64, points: &[Vec<f64>]) -> Result<()> {
        let mut s = String::new();
        s.push_str(&(0..self.state_dim).map(|j| format!("x{j}")).collect::<Vec<_>>().join(","));
        for o in 0..self.y_dim {
            s.push_str(&format!(",y{o}"));
        }
        s.push('\n');
        for x in points {
            let y = self.evaluate_y(t, x)?;
            let row: Vec<String> = x.iter().chain(&y).map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Terminal condition `Y_T = g(X_T)`.
pub type Terminal<'a> = &'a (dyn Fn(&[f64], &mut [f64]) + Sync);

/// Generic explicit backward LSMC over a stored ensemble.
pub(crate) fn solve_backward(
    ensemble: &PathEnsemble,
    driver: &dyn Driver,
    terminal: Option<Terminal>,
    basis: &RegressionBasis,
    picard: usize,
) -> Result<BsdeSolution> {
    let mut only = Some(ensemble);
    solve_backward_blocks(&ensemble.grid, 1, &mut |_| Ok(Cow::Borrowed(only.take().expect("single block"))), driver, terminal, basis, picard, false, None)
}

/// Observer of the carried `Y` values at each backward slice:
/// `(t, states, y)` with states and values flattened by path.
pub(crate) type SliceObserver<'a> = &'a mut dyn FnMut(f64, &[f64], &[f64]);

/// Backward LSMC over consecutive blocks of paths covering `grid`. Blocks are
/// requested last to first; block `b + 1` must start where block `b` ends.
/// With `pathwise`, unregressed values `Y_i = Y_{i+1} + f(Y_{i+1}, Ẑ)dt` are
/// carried alongside and regressed once at slice 0.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_backward_blocks<'e>(
    grid: &TimeGrid,
    n_blocks: usize,
    get_block: &mut dyn FnMut(usize) -> Result<Cow<'e, PathEnsemble>>,
    driver: &dyn Driver,
    terminal: Option<Terminal>,
    basis: &RegressionBasis,
    picard: usize,
    pathwise: bool,
    mut observer: Option<SliceObserver>,
) -> Result<BsdeSolution> {
    let k = driver.y_dim();
    let grid = *grid;
    let dt = grid.dt();
    let mut y_slices = Vec::with_capacity(grid.n_steps + 1);
    let mut z_slices = Vec::with_capacity(grid.n_steps);
    let mut ridge_slices = 0;
    let mut max_condition: f64 = 0.0;
    let mut y_next: Vec<f64> = Vec::new();
    let mut y_raw: Vec<f64> = Vec::new();
    let mut pathwise_y0 = None;
    let mut meta = None;
    let mut steps_seen = 0;

    for b in (0..n_blocks).rev() {
        let ens = get_block(b)?;
        let n = ens.state_dim;
        let np = ens.n_paths;
        let exps = basis.exponents(n);
        let slice_states = |i: usize| -> Vec<f64> {
            let mut xs = Vec::with_capacity(np * n);
            for p in 0..np {
                xs.extend_from_slice(ens.state(p, i));
            }
            xs
        };
        if b == n_blocks - 1 {
            y_next = vec![0.0; np * k];
            if let Some(g) = terminal {
                for p in 0..np {
                    g(ens.terminal(p), &mut y_next[p * k..(p + 1) * k]);
                }
            }
            let last = ens.grid.n_steps;
            let xs = slice_states(last);
            let ts = vec![ens.grid.time(last); np];
            let design = Design::new(basis, &exps, n, &xs, &ts);
            let (fit_n, fitted) = design.fit(&y_next, k);
            if pathwise {
                y_raw = y_next.clone();
            }
            if terminal.is_some() {
                y_next = fitted;
            }
            if let Some(obs) = observer.as_mut() {
                obs(ens.grid.time(last), &xs, &y_next);
            }
            y_slices.push(fit_n);
            meta = Some((n, np, ens.seed, exps.clone()));
        }

        let mut z_target = vec![0.0; np * k * n];
        let mut y_target = vec![0.0; np * k];
        let mut drv = vec![0.0; k];
        for i in (0..ens.grid.n_steps).rev() {
            let t = ens.grid.time(i);
            let xs = slice_states(i);
            let ts = vec![t; np];
            let design = Design::new(basis, &exps, n, &xs, &ts);
            if design.ridge > 0.0 {
                ridge_slices += 1;
            }
            if design.condition.is_finite() {
                max_condition = max_condition.max(design.condition);
            }
            let (_, ey) = design.fit(&y_next, k);
            for p in 0..np {
                let dw = ens.increment(p, i);
                for r in 0..k {
                    let dy = y_next[p * k + r] - ey[p * k + r];
                    for c in 0..n {
                        z_target[(p * k + r) * n + c] = dy * dw[c] / dt;
                    }
                }
            }
            let (z_fit, z_hat) = design.fit(&z_target, k * n);
            let mut y_arg = y_next.clone();
            let mut y_fit = None;
            let mut y_hat = Vec::new();
            for _ in 0..=picard {
                for p in 0..np {
                    driver.eval(
                        t,
                        &xs[p * n..(p + 1) * n],
                        ens.control(p, i),
                        &y_arg[p * k..(p + 1) * k],
                        &z_hat[p * k * n..(p + 1) * k * n],
                        &mut drv,
                    )?;
                    let dw = ens.increment(p, i);
                    for r in 0..k {
                        let z = &z_hat[(p * k + r) * n..(p * k + r + 1) * n];
                        let mart: f64 = z.iter().zip(dw).map(|(z, w)| z * w).sum();
                        y_target[p * k + r] = y_next[p * k + r] + drv[r] * dt - mart;
                    }
                }
                let (f, fitted) = design.fit(&y_target, k);
                y_fit = Some(f);
                y_hat = fitted;
                y_arg.clone_from(&y_hat);
            }
            if pathwise {
                for p in 0..np {
                    let yr = &mut y_raw[p * k..(p + 1) * k];
                    driver.eval(t, &xs[p * n..(p + 1) * n], ens.control(p, i), yr, &z_hat[p * k * n..(p + 1) * k * n], &mut drv)?;
                    for r in 0..k {
                        yr[r] += drv[r] * dt;
                    }
                }
                if b == 0 && i == 0 {
                    pathwise_y0 = Some(design.fit(&y_raw, k).0);
                }
            }
            let y_fit = y_fit.expect("at least one pass");
            if !(y_fit.coef.iter().chain(&z_fit.coef).all(|v| v.is_finite())) {
                return Err(Error::Regression { slice: grid.n_steps - steps_seen - (ens.grid.n_steps - i) });
            }
            if let Some(obs) = observer.as_mut() {
                obs(t, &xs, &y_hat);
            }
            y_slices.push(y_fit);
            z_slices.push(z_fit);
            y_next = y_hat;
        }
        steps_seen += ens.grid.n_steps;
    }
    if steps_seen != grid.n_steps {
        return Err(Error::InvalidArgument(format!("blocks cover {steps_seen} steps, grid has {}", grid.n_steps)));
    }
    if ridge_slices > 0 {
        log::warn!("ridge regularization applied on {ridge_slices} slices (condition > {RIDGE_CONDITION:e})");
    }
    let (n, np, seed, exps) = meta.ok_or_else(|| Error::InvalidArgument("no blocks".into()))?;
    y_slices.reverse();
    z_slices.reverse();
    Ok(BsdeSolution {
        grid,
        basis: basis.clone(),
        state_dim: n,
        y_dim: k,
        y_slices,
        z_slices,
        diagnostics: BsdeDiagnostics {
            horizon: grid.t_end,
            ridge_slices,
            max_condition,
            n_paths: np,
            seed,
            ..Default::default()
        },
        pathwise_y0,
        exps,
    })
}

/// Finite-horizon adjoint with terminal condition `Y_T = g′(X_T)` (zero when
/// `terminal` is `None`), solved over the ensemble's grid.
pub fn solve_fh_adjoint(
    model: &ControlledDiffusion,
    ensemble: &PathEnsemble,
    terminal: Option<Terminal>,
    basis: &RegressionBasis,
    policy: GradientPolicy,
    picard: usize,
) -> Result<BsdeSolution> {
    if ensemble.state_dim != model.state_dim() || ensemble.control_dim != model.control_dim() {
        return Err(Error::Dimension("ensemble does not match model dimensions".into()));
    }
    solve_backward(ensemble, &AdjointDriver { model, policy }, terminal, basis, picard)
}

/// Parameters of the infinite-horizon construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhParams {
    /// Dissipativity rate `k > 0`.
    pub k: f64,
    /// Evaluation window `[0, T₀]`.
    pub eval_window: f64,
    /// First horizon; `4/k` when absent.
    pub t_init: Option<f64>,
    pub growth_factor: f64,
    pub tol: f64,
    /// Gaps required before the stopping rule applies.
    pub min_comparisons: usize,
    pub max_horizons: usize,
    pub dt: f64,
    pub n_paths: usize,
    pub n_test: usize,
    pub seed: u64,
    pub initial: InitialLaw,
    pub basis: RegressionBasis,
    pub policy: GradientPolicy,
    pub picard: usize,
    /// Steps per regenerated block of paths.
    pub block_len: usize,
}

impl IhParams {
    pub fn new(k: f64, x0: Vec<f64>, seed: u64) -> Self {
        IhParams {
            k,
            eval_window: 1.0,
            t_init: None,
            growth_factor: 1.5,
            tol: 0.02,
            min_comparisons: 3,
            max_horizons: 12,
            dt: 0.02,
            n_paths: 10_000,
            n_test: 200,
            seed,
            initial: InitialLaw::Gaussian { mean: x0, sd: 1.0 },
            basis: RegressionBasis::default(),
            policy: GradientPolicy::AnalyticOnly,
            picard: 0,
            block_len: 250,
        }
    }
}

/// Test points drawn from the initial law on their own stream.
pub fn test_points(initial: &InitialLaw, n_test: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let (mean, sd) = match initial {
        InitialLaw::Point(x) => (x.clone(), 1.0),
        InitialLaw::Gaussian { mean, sd } => (mean.clone(), *sd),
    };
    (0..n_test)
        .map(|i| {
            let mut rng = path_rng(substream(seed, "test-points"), i as u64);
            mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal).clamp(-2.5, 2.5)).collect()
        })
        .collect()
}

fn eval_times(t0: f64) -> Vec<f64> {
    (0..=4).map(|j| t0 * j as f64 / 4.0).collect()
}

/// Infinite-horizon adjoint: zero-terminal solves at `T_j = T_init·gʲ` on a
/// shared seed until the sup-gap over the evaluation window and the test
/// points drops below `tol` (after at least `min_comparisons` gaps).
pub fn solve_ih_adjoint(model: &ControlledDiffusion, law: &ControlLaw, params: &IhParams) -> Result<BsdeSolution> {
    if !(params.k > 0.0) {
        return Err(Error::MissingConstant("dissipativity rate k > 0"));
    }
    if !(params.growth_factor > 1.0) || !(params.tol > 0.0) {
        return Err(Error::InvalidArgument("growth_factor must exceed 1 and tol be positive".into()));
    }
    // Horizons are whole multiples of dt so that every solve reuses the same
    // paths on the common part of the time axis.
    let snap = |t: f64| (t / params.dt).round().max(1.0) * params.dt;
    let t_init = snap(params.t_init.unwrap_or(4.0 / params.k).max(params.eval_window + params.dt));
    let tests = test_points(&params.initial, params.n_test, params.seed);
    let times = eval_times(params.eval_window);

    let solve_at = |horizon: f64| -> Result<(BsdeSolution, Vec<Vec<f64>>)> {
        let grid = TimeGrid::with_step(horizon, params.dt)?;
        let paths = simulate_checkpointed(model, law, &grid, &params.initial, params.n_paths, params.seed, params.block_len)?;
        let mut get = |b: usize| paths.block(model, law, b).map(Cow::Owned);
        let driver = AdjointDriver { model, policy: params.policy };
        let sol = solve_backward_blocks(&grid, paths.n_blocks(), &mut get, &driver, None, &params.basis, params.picard, false, None)?;
        let vals = times
            .iter()
            .flat_map(|t| {
                let i = grid.index_of(*t);
                tests.iter().map(|x| sol.y_at_slice(i, x)).collect::<Vec<_>>()
            })
            .collect();
        Ok((sol, vals))
    };

    let mut horizon = t_init;
    let (mut current, mut prev_vals) = solve_at(horizon)?;
    let mut history: Vec<CauchyPoint> = Vec::new();
    let mut rising = 0;
    let mut converged = false;
    for _ in 1..params.max_horizons {
        let next = snap(horizon * params.growth_factor);
        let (sol, vals) = solve_at(next)?;
        let gap = prev_vals
            .iter()
            .zip(&vals)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if let Some(last) = history.last() {
            if gap >= last.gap {
                rising += 1;
                if rising >= 3 {
                    return Err(Error::NoContraction(rising));
                }
            } else {
                rising = 0;
            }
        }
        log::info!("adjoint horizon {horizon:.3} -> {next:.3}: gap {gap:.3e}");
        history.push(CauchyPoint { horizon, next_horizon: next, gap });
        current = sol;
        prev_vals = vals;
        horizon = next;
        if gap <= params.tol && history.len() >= params.min_comparisons {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged(format!(
            "Cauchy gap {:.3e} above tol {:.3e} after {} horizons",
            history.last().map_or(f64::NAN, |c| c.gap),
            params.tol,
            params.max_horizons
        )));
    }

    let strictly_decreasing = history.windows(2).all(|w| w[1].gap < w[0].gap);
    let (slope, consistent) = if history.len() >= 2 {
        let ts: Vec<f64> = history.iter().map(|c| c.horizon).collect();
        let ls: Vec<f64> = history.iter().map(|c| c.gap.max(1e-300).ln()).collect();
        let (_, s, _) = linalg::linear_fit(&ts, &ls);
        let ratio = s / (-2.0 * params.k);
        (Some(s), Some(s < 0.0 && (0.1..=10.0).contains(&ratio)))
    } else {
        (None, None)
    };
    let mut sol = current.restrict(params.eval_window);
    sol.diagnostics.horizon = horizon;
    sol.diagnostics.cauchy_history = history;
    sol.diagnostics.decay_slope = slope;
    sol.diagnostics.expected_slope = Some(-2.0 * params.k);
    sol.diagnostics.slope_consistent = consistent;
    sol.diagnostics.strictly_decreasing = Some(strictly_decreasing);
    Ok(sol)
}

/// Check `sup ‖Y(t, X_t)‖ ≤ 1.1·C/k` over the ensemble and the solution's
/// time range. Skipped when `C` is not declared (unbounded `∇ₓL`).
pub fn verify_bound(solution: &BsdeSolution, ensemble: &PathEnsemble, k: f64, c: Option<f64>) -> Result<BoundReport> {
    if !(k > 0.0) {
        return Err(Error::MissingConstant("dissipativity rate k > 0"));
    }
    let last = solution.grid.n_steps.min(ensemble.grid.n_steps);
    let mut sup = 0.0;
    let mut witness = None;
    for i in 0..=last {
        let t = ensemble.grid.time(i);
        let si = solution.grid.index_of(t);
        for p in 0..ensemble.n_paths {
            let x = ensemble.state(p, i);
            let v = linalg::norm(&solution.y_at_slice(si, x));
            if v > sup {
                sup = v;
                witness = Some((t, x.to_vec()));
            }
        }
    }
    let Some(c) = c else {
        return Ok(BoundReport {
            skipped: true,
            reason: Some("unbounded ∇ₓL: no cost-gradient bound C declared".into()),
            bound: None,
            sup_norm: sup,
            witness,
            holds: true,
        });
    };
    let bound = c / k;
    let holds = sup <= bound * 1.1;
    Ok(BoundReport { skipped: false, reason: None, bound: Some(bound), sup_norm: sup, witness, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::simulate_forward_from;

    fn lq(a: f64, q: f64, r: f64) -> ControlledDiffusion {
        ControlledDiffusion::builder("lq", 1, 1)
            .drift_1d(move |_, x, u| a * x + u)
            .diffusion_1d(|_, _, _| 1.0)
            .cost_1d(move |_, x, u| q * x * x + r * u * u)
            .drift_x_1d(move |_, _, _| a)
            .diffusion_x_1d(|_, _, _| 0.0)
            .cost_x_1d(move |_, x, _| 2.0 * q * x)
            .build()
            .unwrap()
    }

    #[test]
    fn exponents_count_monomials() {
        assert_eq!(RegressionBasis::polynomial(3).exponents(1).len(), 4);
        assert_eq!(RegressionBasis::polynomial(3).exponents(2).len(), 10);
        assert_eq!(RegressionBasis::polynomial(2).with_period(1.0).n_features(1), 9);
        assert_eq!(RegressionBasis::polynomial(3).exponents(2)[0], vec![0, 0]);
    }

    #[test]
    fn regression_recovers_cubic() {
        let basis = RegressionBasis::polynomial(3);
        let exps = basis.exponents(1);
        let xs: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - x + 0.5 * x * x * x).collect();
        let d = Design::new(&basis, &exps, 1, &xs, &vec![0.0; 200]);
        let (fit, _) = d.fit(&ys, 1);
        let mut out = [0.0];
        fit.predict_into(&basis, &exps, 0.0, &[1.3], &mut out);
        assert!((out[0] - (1.0 - 1.3 + 0.5 * 1.3f64.powi(3))).abs() < 1e-8);
    }

    #[test]
    fn degenerate_slice_fits_constant() {
        let basis = RegressionBasis::polynomial(3);
        let exps = basis.exponents(1);
        let d = Design::new(&basis, &exps, 1, &[2.0; 50], &[0.0; 50]);
        let ys: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let (fit, _) = d.fit(&ys, 1);
        let mut out = [0.0];
        fit.predict_into(&basis, &exps, 0.0, &[2.0], &mut out);
        assert!((out[0] - 24.5).abs() < 1e-6);
        assert!(fit.ridge > 0.0);
    }

    #[test]
    fn zero_cost_zero_terminal_gives_zero() {
        let m = ControlledDiffusion::builder("ou", 1, 1)
            .drift_1d(|_, x, _| -x)
            .diffusion_1d(|_, _, _| 1.0)
            .drift_x_1d(|_, _, _| -1.0)
            .diffusion_x_1d(|_, _, _| 0.0)
            .cost_x_1d(|_, _, _| 0.0)
            .build()
            .unwrap();
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let e = simulate_forward(&m, 500, &g);
        let s = solve_fh_adjoint(&m, &e, None, &RegressionBasis::default(), GradientPolicy::AnalyticOnly, 0).unwrap();
        for i in 0..=20 {
            assert_eq!(s.y_at_slice(i, &[0.7])[0], 0.0);
        }
        assert_eq!(s.evaluate_z(0.0, &[0.7]).unwrap()[0], 0.0);
    }

    fn simulate_forward(m: &ControlledDiffusion, n: usize, g: &TimeGrid) -> PathEnsemble {
        let init = InitialLaw::Gaussian { mean: vec![0.0], sd: 1.0 };
        simulate_forward_from(m, &ControlLaw::zero(1), g, &init, n, 5).unwrap()
    }

    #[test]
    fn constant_terminal_is_a_martingale() {
        let m = ControlledDiffusion::builder("ou", 1, 1)
            .drift_1d(|_, x, _| -x)
            .diffusion_1d(|_, _, _| 1.0)
            .drift_x_1d(|_, _, _| 0.0)
            .diffusion_x_1d(|_, _, _| 0.0)
            .cost_x_1d(|_, _, _| 0.0)
            .build()
            .unwrap();
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let e = simulate_forward(&m, 500, &g);
        let term = |_: &[f64], out: &mut [f64]| out[0] = 1.7;
        let s = solve_fh_adjoint(&m, &e, Some(&term), &RegressionBasis::default(), GradientPolicy::AnalyticOnly, 0)
            .unwrap();
        for t in [0.0, 0.5, 1.0] {
            assert!((s.evaluate_y(t, &[0.3]).unwrap()[0] - 1.7).abs() < 1e-9);
            assert!(s.evaluate_z(t, &[0.3]).unwrap()[0].abs() < 1e-9);
        }
        assert!(s.evaluate_y(1.5, &[0.0]).is_err());
    }

    #[test]
    fn lq_finite_horizon_matches_linear_ode() {
        // Under u = -Kx the adjoint is Y(t,x) = c(T-t) x with
        // dc/dτ = (2a - K) c + 2, c(0) = 0, integrated here by RK4.
        let (a, k) = (-1.0, 2f64.sqrt() - 1.0);
        let m = lq(a, 1.0, 1.0);
        let law = ControlLaw::linear_feedback_1d(k);
        let g = TimeGrid::new(0.0, 6.0, 300).unwrap();
        let init = InitialLaw::Gaussian { mean: vec![0.0], sd: 1.0 };
        let e = simulate_forward_from(&m, &law, &g, &init, 8000, 17).unwrap();
        let s = solve_fh_adjoint(&m, &e, None, &RegressionBasis::default(), GradientPolicy::AnalyticOnly, 0).unwrap();
        let f = |c: f64| (2.0 * a - k) * c + 2.0;
        let (mut c, h) = (0.0, 1e-3);
        for _ in 0..6000 {
            let k1 = f(c);
            let k2 = f(c + 0.5 * h * k1);
            let k3 = f(c + 0.5 * h * k2);
            let k4 = f(c + h * k3);
            c += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let slope = (s.evaluate_y(0.0, &[1.0]).unwrap()[0] - s.evaluate_y(0.0, &[-1.0]).unwrap()[0]) / 2.0;
        assert!((slope / c - 1.0).abs() < 0.05, "slope {slope} vs {c}");
    }

    #[test]
    fn constant_shift_in_cost_leaves_driver_unchanged() {
        let m = lq(-1.0, 1.0, 1.0);
        let shifted = m.with_affine_cost(1.0, 3.0);
        let d0 = AdjointDriver { model: &m, policy: GradientPolicy::AnalyticOnly };
        let d1 = AdjointDriver { model: &shifted, policy: GradientPolicy::AnalyticOnly };
        let (mut a, mut b) = ([0.0], [0.0]);
        d0.eval(0.1, &[0.7], &[0.2], &[1.1], &[0.4], &mut a).unwrap();
        d1.eval(0.1, &[0.7], &[0.2], &[1.1], &[0.4], &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cost_infinite_horizon_converges_immediately() {
        let m = ControlledDiffusion::builder("ou", 1, 1)
            .drift_1d(|_, x, _| -x)
            .diffusion_1d(|_, _, _| 1.0)
            .drift_x_1d(|_, _, _| -1.0)
            .diffusion_x_1d(|_, _, _| 0.0)
            .cost_x_1d(|_, _, _| 0.0)
            .build()
            .unwrap();
        let mut p = IhParams::new(1.0, vec![0.0], 1);
        p.n_paths = 300;
        p.min_comparisons = 1;
        let s = solve_ih_adjoint(&m, &ControlLaw::zero(1), &p).unwrap();
        assert_eq!(s.diagnostics.cauchy_history.len(), 1);
        assert_eq!(s.diagnostics.cauchy_history[0].gap, 0.0);
        assert_eq!(s.evaluate_y(0.0, &[1.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn bound_is_skipped_without_gradient_bound() {
        let m = lq(-1.0, 1.0, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let e = simulate_forward_from(&m, &ControlLaw::zero(1), &g, &InitialLaw::Point(vec![0.0]), 50, 1).unwrap();
        let s = solve_fh_adjoint(&m, &e, None, &RegressionBasis::default(), GradientPolicy::AnalyticOnly, 0).unwrap();
        let r = verify_bound(&s, &e, 1.0, None).unwrap();
        assert!(r.skipped && r.reason.unwrap().contains("unbounded"));
    }

    #[test]
    fn solution_round_trips_through_json() {
        let m = lq(-1.0, 1.0, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let e = simulate_forward(&m, 200, &g);
        let s = solve_fh_adjoint(&m, &e, None, &RegressionBasis::default(), GradientPolicy::AnalyticOnly, 0).unwrap();
        let back: BsdeSolution = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        let back = back.rehydrate();
        assert_eq!(back.evaluate_y(0.0, &[0.4]).unwrap(), s.evaluate_y(0.0, &[0.4]).unwrap());
    }
}
