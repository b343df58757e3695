//! The Hamiltonian `H(t,x,u,y,z) = b·y + Tr(σᵀz) + L`, its gradients, its
//! minimizer over controls and a sampled convexity probe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlledDiffusion, GradientPolicy, SampleRegion};
use crate::rng::stream_rng;

fn check(model: &ControlledDiffusion, x: &[f64], u: &[f64], y: &[f64], z: &[f64]) -> Result<()> {
    model.check_dims(x, u)?;
    let n = model.state_dim();
    if y.len() != n || z.len() != n * n {
        return Err(Error::Dimension(format!(
            "y must have length {n} and z length {} (got {}, {})",
            n * n,
            y.len(),
            z.len()
        )));
    }
    Ok(())
}

/// Evaluate `H` without dimension checks.
#[inline]
pub(crate) fn eval_h_unchecked(
    model: &ControlledDiffusion,
    t: f64,
    x: &[f64],
    u: &[f64],
    y: &[f64],
    z: &[f64],
    b: &mut [f64],
    s: &mut [f64],
) -> f64 {
    model.drift_into(t, x, u, b);
    model.diffusion_into(t, x, u, s);
    let by: f64 = b.iter().zip(y).map(|(a, c)| a * c).sum();
    let tr: f64 = s.iter().zip(z).map(|(a, c)| a * c).sum();
    by + tr + model.cost(t, x, u)
}

pub fn eval_h(model: &ControlledDiffusion, t: f64, x: &[f64], u: &[f64], y: &[f64], z: &[f64]) -> Result<f64> {
    check(model, x, u, y, z)?;
    let n = model.state_dim();
    let v = eval_h_unchecked(model, t, x, u, y, z, &mut vec![0.0; n], &mut vec![0.0; n * n]);
    if !v.is_finite() {
        return Err(Error::NonFinite { what: "Hamiltonian", t, x: x.to_vec(), u: u.to_vec() });
    }
    Ok(v)
}

/// Reusable buffers for repeated gradient evaluations.
pub struct HamiltonianWork {
    jb: Vec<f64>,
    js: Vec<f64>,
    gl: Vec<f64>,
}

impl HamiltonianWork {
    pub fn new(n: usize, m: usize) -> Self {
        let k = n.max(m);
        HamiltonianWork { jb: vec![0.0; n * k], js: vec![0.0; n * n * k], gl: vec![0.0; k] }
    }
}

/// `∇ₓH = (∇ₓb)ᵀy + Σ_ij ∂ₓσ_ij z_ij + ∇ₓL` into `out`.
#[allow(clippy::too_many_arguments)]
pub fn grad_h_x_into(
    model: &ControlledDiffusion,
    t: f64,
    x: &[f64],
    u: &[f64],
    y: &[f64],
    z: &[f64],
    policy: GradientPolicy,
    work: &mut HamiltonianWork,
    out: &mut [f64],
) -> Result<()> {
    let n = model.state_dim();
    let jb = &mut work.jb[..n * n];
    let js = &mut work.js[..n * n * n];
    let gl = &mut work.gl[..n];
    model.drift_jacobian_x(t, x, u, policy, jb)?;
    model.diffusion_jacobian_x(t, x, u, policy, js)?;
    model.cost_gradient_x(t, x, u, policy, gl)?;
    contract(n, n, jb, js, gl, y, z, out);
    Ok(())
}

/// `∇ᵤH` into `out` (length `control_dim`).
#[allow(clippy::too_many_arguments)]
pub fn grad_h_u_into(
    model: &ControlledDiffusion,
    t: f64,
    x: &[f64],
    u: &[f64],
    y: &[f64],
    z: &[f64],
    policy: GradientPolicy,
    work: &mut HamiltonianWork,
    out: &mut [f64],
) -> Result<()> {
    let n = model.state_dim();
    let m = model.control_dim();
    let jb = &mut work.jb[..n * m];
    let js = &mut work.js[..n * n * m];
    let gl = &mut work.gl[..m];
    model.drift_jacobian_u(t, x, u, policy, jb)?;
    model.diffusion_jacobian_u(t, x, u, policy, js)?;
    model.cost_gradient_u(t, x, u, policy, gl)?;
    contract(n, m, jb, js, gl, y, z, out);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn contract(n: usize, d: usize, jb: &[f64], js: &[f64], gl: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
    for l in 0..d {
        let mut acc = gl[l];
        for i in 0..n {
            acc += jb[i * d + l] * y[i];
            for j in 0..n {
                acc += js[(i * n + j) * d + l] * z[i * n + j];
            }
        }
        out[l] = acc;
    }
}

pub fn grad_h_x(
    model: &ControlledDiffusion,
    t: f64,
    x: &[f64],
    u: &[f64],
    y: &[f64],
    z: &[f64],
    policy: GradientPolicy,
) -> Result<Vec<f64>> {
    check(model, x, u, y, z)?;
    let mut out = vec![0.0; model.state_dim()];
    let mut w = HamiltonianWork::new(model.state_dim(), model.control_dim());
    grad_h_x_into(model, t, x, u, y, z, policy, &mut w, &mut out)?;
    Ok(out)
}

pub fn grad_h_u(
    model: &ControlledDiffusion,
    t: f64,
    x: &[f64],
    u: &[f64],
    y: &[f64],
    z: &[f64],
    policy: GradientPolicy,
) -> Result<Vec<f64>> {
    check(model, x, u, y, z)?;
    let mut out = vec![0.0; model.control_dim()];
    let mut w = HamiltonianWork::new(model.state_dim(), model.control_dim());
    grad_h_u_into(model, t, x, u, y, z, policy, &mut w, &mut out)?;
    Ok(out)
}

/// Centered differences of `H` itself in `x` (`wrt_state`) or in `u`.
pub fn grad_h_fd(
    model: &ControlledDiffusion,
    t: f64,
    x: &[f64],
    u: &[f64],
    y: &[f64],
    z: &[f64],
    wrt_state: bool,
) -> Result<Vec<f64>> {
    check(model, x, u, y, z)?;
    let base = if wrt_state { x } else { u };
    let h = crate::model::default_step(base);
    let mut out = vec![0.0; base.len()];
    let mut p = base.to_vec();
    for (j, o) in out.iter_mut().enumerate() {
        let orig = p[j];
        p[j] = orig + h;
        let up = if wrt_state { eval_h(model, t, &p, u, y, z)? } else { eval_h(model, t, x, &p, y, z)? };
        p[j] = orig - h;
        let dn = if wrt_state { eval_h(model, t, &p, u, y, z)? } else { eval_h(model, t, x, &p, y, z)? };
        p[j] = orig;
        *o = (up - dn) / (2.0 * h);
    }
    Ok(out)
}

/// Result of minimizing `H` over the control set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HMinimum {
    pub u: Vec<f64>,
    pub h: f64,
    pub projected_grad_norm: f64,
    pub converged: bool,
    pub on_boundary: bool,
    pub iterations: usize,
}

const GRID_POINTS: usize = 33;
const GRID_LEVELS: usize = 3;
const MAX_ITER: usize = 5000;

fn project(u: &mut [f64], bounds: Option<(&[f64], &[f64])>) {
    if let Some((lo, hi)) = bounds {
        for ((v, l), h) in u.iter_mut().zip(lo).zip(hi) {
            *v = v.clamp(*l, *h);
        }
    }
}

fn projected_norm(u: &[f64], g: &[f64], bounds: Option<(&[f64], &[f64])>) -> f64 {
    let mut s = 0.0;
    for j in 0..u.len() {
        let mut gj = g[j];
        if let Some((lo, hi)) = bounds {
            let at_lo = u[j] <= lo[j] + 1e-12 * (1.0 + lo[j].abs());
            let at_hi = u[j] >= hi[j] - 1e-12 * (1.0 + hi[j].abs());
            if (at_lo && gj > 0.0) || (at_hi && gj < 0.0) {
                gj = 0.0;
            }
        }
        s += gj * gj;
    }
    s.sqrt()
}

struct Objective<'a> {
    model: &'a ControlledDiffusion,
    t: f64,
    x: &'a [f64],
    y: &'a [f64],
    z: &'a [f64],
    policy: GradientPolicy,
    b: Vec<f64>,
    s: Vec<f64>,
    work: HamiltonianWork,
}

impl Objective<'_> {
    fn value(&mut self, u: &[f64]) -> f64 {
        eval_h_unchecked(self.model, self.t, self.x, u, self.y, self.z, &mut self.b, &mut self.s)
    }

    fn grad(&mut self, u: &[f64], out: &mut [f64]) -> Result<()> {
        grad_h_u_into(self.model, self.t, self.x, u, self.y, self.z, self.policy, &mut self.work, out)
    }
}

/// Projected gradient descent with Barzilai–Borwein steps and Armijo
/// backtracking along the projection arc.
fn projected_gradient(
    obj: &mut Objective,
    u0: &[f64],
    bounds: Option<(&[f64], &[f64])>,
) -> Result<(Vec<f64>, f64, f64, bool, usize)> {
    let m = u0.len();
    let mut u = u0.to_vec();
    project(&mut u, bounds);
    let mut f = obj.value(&u);
    let mut g = vec![0.0; m];
    obj.grad(&u, &mut g)?;
    let mut step = 1.0;
    let mut cand = vec![0.0; m];
    let mut g_new = vec![0.0; m];
    for it in 0..MAX_ITER {
        let pg = projected_norm(&u, &g, bounds);
        if pg <= 1e-6 * (1.0 + f.abs()) * 1e-2 {
            return Ok((u, f, pg, true, it));
        }
        let mut accepted = false;
        for _ in 0..80 {
            for j in 0..m {
                cand[j] = u[j] - step * g[j];
            }
            project(&mut cand, bounds);
            let decrease: f64 = (0..m).map(|j| g[j] * (cand[j] - u[j])).sum();
            let fc = obj.value(&cand);
            if fc <= f + 1e-4 * decrease {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            let pg = projected_norm(&u, &g, bounds);
            return Ok((u, f, pg, pg <= 1e-6 * (1.0 + f.abs()), it));
        }
        obj.grad(&cand, &mut g_new)?;
        let mut ss = 0.0;
        let mut sy = 0.0;
        for j in 0..m {
            let sj = cand[j] - u[j];
            ss += sj * sj;
            sy += sj * (g_new[j] - g[j]);
        }
        let moved = ss.sqrt();
        u.copy_from_slice(&cand);
        f = obj.value(&u);
        std::mem::swap(&mut g, &mut g_new);
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (step * 2.0).min(1e12) };
        if moved <= 1e-15 * (1.0 + crate::linalg::norm(&u)) {
            let pg = projected_norm(&u, &g, bounds);
            return Ok((u, f, pg, pg <= 1e-6 * (1.0 + f.abs()), it + 1));
        }
    }
    let pg = projected_norm(&u, &g, bounds);
    Ok((u, f, pg, pg <= 1e-6 * (1.0 + f.abs()), MAX_ITER))
}

/// Multi-resolution grid search over a box (control dimension 1 or 2).
fn grid_search(obj: &mut Objective, lo: &[f64], hi: &[f64]) -> (Vec<f64>, f64) {
    let m = lo.len();
    let mut lo = lo.to_vec();
    let mut hi = hi.to_vec();
    let mut best = (lo.clone(), f64::INFINITY);
    let (orig_lo, orig_hi) = (lo.clone(), hi.clone());
    for _level in 0..GRID_LEVELS {
        let h: Vec<f64> = (0..m).map(|j| (hi[j] - lo[j]) / (GRID_POINTS - 1) as f64).collect();
        let total = GRID_POINTS.pow(m as u32);
        let mut u = vec![0.0; m];
        for idx in 0..total {
            let mut r = idx;
            for j in 0..m {
                u[j] = lo[j] + h[j] * (r % GRID_POINTS) as f64;
                r /= GRID_POINTS;
            }
            let f = obj.value(&u);
            if f < best.1 {
                best = (u.clone(), f);
            }
        }
        for j in 0..m {
            lo[j] = (best.0[j] - 2.0 * h[j]).max(orig_lo[j]);
            hi[j] = (best.0[j] + 2.0 * h[j]).min(orig_hi[j]);
        }
    }
    best
}

/// Minimize `u ↦ H(t,x,u,y,z)` over the box `bounds` (or all of ℝᵐ).
///
/// With bounds and control dimension ≤ 2 a three-level 33-point grid seeds
/// the search; the result is then polished by projected gradient. Otherwise
/// projected gradient starts from `u_init`. `converged` is false when the
/// projected gradient exceeds `1e-6 (1 + |H*|)` at the returned point.
#[allow(clippy::too_many_arguments)]
pub fn minimize_h_u(
    model: &ControlledDiffusion,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    u_init: &[f64],
    bounds: Option<(&[f64], &[f64])>,
    policy: GradientPolicy,
) -> Result<HMinimum> {
    check(model, x, u_init, y, z)?;
    let m = model.control_dim();
    if let Some((lo, hi)) = bounds {
        if lo.len() != m || hi.len() != m {
            return Err(Error::Dimension("control bounds do not match control dimension".into()));
        }
        if lo.iter().zip(hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("control bounds inverted".into()));
        }
    }
    let n = model.state_dim();
    let mut obj = Objective {
        model,
        t,
        x,
        y,
        z,
        policy,
        b: vec![0.0; n],
        s: vec![0.0; n * n],
        work: HamiltonianWork::new(n, m),
    };
    let start = match bounds {
        Some((lo, hi)) if m <= 2 && lo.iter().zip(hi).all(|(l, h)| (h - l).is_finite()) => {
            let (g, fg) = grid_search(&mut obj, lo, hi);
            let fi = {
                let mut ui = u_init.to_vec();
                project(&mut ui, bounds);
                obj.value(&ui)
            };
            if fi < fg {
                let mut ui = u_init.to_vec();
                project(&mut ui, bounds);
                ui
            } else {
                g
            }
        }
        _ => u_init.to_vec(),
    };
    let (u, h, pg, converged, iterations) = projected_gradient(&mut obj, &start, bounds)?;
    if !h.is_finite() {
        return Err(Error::NonFinite { what: "Hamiltonian", t, x: x.to_vec(), u });
    }
    let on_boundary = bounds.is_some_and(|(lo, hi)| {
        u.iter()
            .zip(lo)
            .zip(hi)
            .any(|((v, l), h)| (v - l).abs() <= 1e-9 * (1.0 + l.abs()) || (h - v).abs() <= 1e-9 * (1.0 + h.abs()))
    });
    if !converged {
        log::warn!("minimize_h_u: projected gradient {pg:e} above tolerance after {iterations} iterations");
    }
    Ok(HMinimum { u, h, projected_grad_norm: pg, converged, on_boundary, iterations })
}

/// A sampled violation of midpoint-type convexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityWitness {
    pub t: f64,
    pub p: (Vec<f64>, Vec<f64>),
    pub q: (Vec<f64>, Vec<f64>),
    pub theta: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub holds: bool,
    pub n_samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub worst_violation: f64,
    pub witness: Option<ConvexityWitness>,
}

pub const CONVEXITY_TOL: f64 = 1e-9;

/// Sample `(p, q, θ)` in `(x, u)` space and check
/// `H(θp + (1-θ)q) ≤ θH(p) + (1-θ)H(q) + 1e-9` at a random `(t, y, z)`
/// held fixed within each triple.
pub fn convexity_probe(
    model: &ControlledDiffusion,
    region: &SampleRegion,
    n_samples: usize,
    seed: u64,
) -> Result<ConvexityReport> {
    let n = model.state_dim();
    let m = model.control_dim();
    if region.state_lo.len() != n || region.control_lo.len() != m {
        return Err(Error::Dimension("sample region does not match model dimensions".into()));
    }
    let mut rng = stream_rng(seed);
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * n];
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    for _ in 0..n_samples {
        let t = region.sample_time(&mut rng);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (px, pu) = (region.sample_state(&mut rng), region.sample_control(&mut rng));
        let (qx, qu) = (region.sample_state(&mut rng), region.sample_control(&mut rng));
        let theta: f64 = rng.gen_range(0.0..1.0);
        let mx: Vec<f64> = px.iter().zip(&qx).map(|(a, c)| theta * a + (1.0 - theta) * c).collect();
        let mu: Vec<f64> = pu.iter().zip(&qu).map(|(a, c)| theta * a + (1.0 - theta) * c).collect();
        let hp = eval_h_unchecked(model, t, &px, &pu, &y, &z, &mut b, &mut s);
        let hq = eval_h_unchecked(model, t, &qx, &qu, &y, &z, &mut b, &mut s);
        let hm = eval_h_unchecked(model, t, &mx, &mu, &y, &z, &mut b, &mut s);
        if !(hp.is_finite() && hq.is_finite() && hm.is_finite()) {
            return Err(Error::NonFinite { what: "Hamiltonian", t, x: mx, u: mu });
        }
        let violation = hm - (theta * hp + (1.0 - theta) * hq);
        if violation > worst {
            worst = violation;
            if violation > CONVEXITY_TOL {
                witness = Some(ConvexityWitness { t, p: (px, pu), q: (qx, qu), theta, y, z, violation });
            }
        }
    }
    Ok(ConvexityReport {
        holds: worst <= CONVEXITY_TOL,
        n_samples,
        seed,
        tolerance: CONVEXITY_TOL,
        worst_violation: worst,
        witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lq(a: f64, q: f64, r: f64) -> ControlledDiffusion {
        ControlledDiffusion::builder("lq", 1, 1)
            .drift_1d(move |_, x, u| a * x + u)
            .diffusion_1d(|_, _, _| 1.0)
            .cost_1d(move |_, x, u| q * x * x + r * u * u)
            .drift_x_1d(move |_, _, _| a)
            .diffusion_x_1d(|_, _, _| 0.0)
            .cost_x_1d(move |_, x, _| 2.0 * q * x)
            .drift_u_1d(|_, _, _| 1.0)
            .diffusion_u_1d(|_, _, _| 0.0)
            .cost_u_1d(move |_, _, u| 2.0 * r * u)
            .build()
            .unwrap()
    }

    const P: GradientPolicy = GradientPolicy::AnalyticOnly;

    #[test]
    fn lq_hamiltonian_value() {
        let m = lq(-1.0, 1.0, 1.0);
        let h = eval_h(&m, 0.0, &[1.0], &[0.5], &[2.0], &[0.3]).unwrap();
        assert!((h - 0.55).abs() < 1e-12);
        assert_eq!(eval_h(&m, 0.0, &[1.0], &[0.5], &[0.0], &[0.0]).unwrap(), 1.25);
    }

    #[test]
    fn zero_model_has_zero_hamiltonian() {
        let m = ControlledDiffusion::builder("zero", 2, 1).build().unwrap();
        assert_eq!(eval_h(&m, 0.3, &[1.0, 2.0], &[3.0], &[4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = lq(-1.0, 1.0, 1.0);
        assert!(matches!(eval_h(&m, 0.0, &[1.0], &[0.5], &[2.0, 1.0], &[0.3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn lq_gradients() {
        let m = lq(-1.0, 1.0, 1.0);
        let gx = grad_h_x(&m, 0.0, &[1.0], &[0.5], &[2.0], &[0.3], P).unwrap();
        let gu = grad_h_u(&m, 0.0, &[1.0], &[0.5], &[2.0], &[0.3], P).unwrap();
        assert!(gx[0].abs() < 1e-12);
        assert!((gu[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn z_enters_through_diffusion_gradient() {
        let m = ControlledDiffusion::builder("tanh", 1, 1)
            .diffusion_1d(|_, x, _| 1.0 + 0.1 * x.tanh())
            .build()
            .unwrap();
        let p = GradientPolicy::AllowFiniteDifference;
        let g0 = grad_h_x(&m, 0.0, &[0.0], &[0.0], &[0.0], &[0.0], p).unwrap()[0];
        let g1 = grad_h_x(&m, 0.0, &[0.0], &[0.0], &[0.0], &[1.0], p).unwrap()[0];
        assert!((g1 - g0 - 0.1).abs() < 1e-6);
    }

    #[test]
    fn analytic_matches_hamiltonian_differences() {
        let m = lq(-1.0, 1.0, 1.0);
        let mut rng = stream_rng(3);
        for _ in 0..100 {
            let x = [rng.gen_range(-3.0..3.0)];
            let u = [rng.gen_range(-3.0..3.0)];
            let y = [rng.gen_range(-3.0..3.0)];
            let z = [rng.gen_range(-3.0..3.0)];
            let a = grad_h_x(&m, 0.0, &x, &u, &y, &z, P).unwrap()[0];
            let f = grad_h_fd(&m, 0.0, &x, &u, &y, &z, true).unwrap()[0];
            assert!((a - f).abs() <= 1e-4 * (1.0 + a.abs()));
            let a = grad_h_u(&m, 0.0, &x, &u, &y, &z, P).unwrap()[0];
            let f = grad_h_fd(&m, 0.0, &x, &u, &y, &z, false).unwrap()[0];
            assert!((a - f).abs() <= 1e-4 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn lq_minimizer() {
        let m = lq(-1.0, 1.0, 1.0);
        let r = minimize_h_u(&m, 0.0, &[1.0], &[2.0], &[0.0], &[0.0], None, P).unwrap();
        assert!((r.u[0] + 1.0).abs() < 1e-6, "{r:?}");
        assert!(r.converged && !r.on_boundary);
    }

    #[test]
    fn linear_hamiltonian_hits_boundary() {
        let m = ControlledDiffusion::builder("lin", 1, 1)
            .drift_1d(|_, x, u| -x + u)
            .drift_u_1d(|_, _, _| 1.0)
            .diffusion_u_1d(|_, _, _| 0.0)
            .cost_u_1d(|_, _, _| 0.0)
            .build()
            .unwrap();
        let r = minimize_h_u(&m, 0.0, &[0.3], &[1.0], &[0.0], &[0.0], Some((&[-1.0], &[1.0])), P).unwrap();
        assert_eq!(r.u, vec![-1.0]);
        assert!(r.on_boundary && r.converged);
    }

    #[test]
    fn quadratic_bowl_in_two_controls() {
        let m = ControlledDiffusion::builder("bowl", 1, 2)
            .cost(|_, _, u| (u[0] - 1.0).powi(2) + (u[1] - 2.0).powi(2) + 7.0)
            .build()
            .unwrap();
        let fd = GradientPolicy::AllowFiniteDifference;
        let free = minimize_h_u(&m, 0.0, &[0.0], &[0.0], &[0.0], &[0.0, 0.0], None, fd).unwrap();
        let boxed = minimize_h_u(&m, 0.0, &[0.0], &[0.0], &[0.0], &[0.0, 0.0], Some((&[-5.0, -5.0], &[5.0, 5.0])), fd)
            .unwrap();
        for r in [free, boxed] {
            assert!((r.u[0] - 1.0).abs() < 1e-6 && (r.u[1] - 2.0).abs() < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn argmin_invariant_under_affine_cost() {
        let m = lq(-1.0, 1.0, 1.0);
        let base = minimize_h_u(&m, 0.0, &[0.7], &[1.3], &[0.2], &[0.0], None, P).unwrap();
        let shifted = m.with_affine_cost(1.0, 5.0);
        let s = minimize_h_u(&shifted, 0.0, &[0.7], &[1.3], &[0.2], &[0.0], None, P).unwrap();
        assert!((s.u[0] - base.u[0]).abs() < 1e-6);
        // Scaling L and (y, z) together scales H.
        let scaled = m.with_affine_cost(3.0, 0.0);
        let s = minimize_h_u(&scaled, 0.0, &[0.7], &[3.9], &[0.6], &[0.0], None, P).unwrap();
        assert!((s.u[0] - base.u[0]).abs() < 1e-6);
    }

    #[test]
    fn multistart_agrees_for_convex_h() {
        let m = lq(-1.0, 1.0, 1.0);
        let mut rng = stream_rng(11);
        let h0 = minimize_h_u(&m, 0.0, &[0.4], &[0.9], &[0.1], &[0.0], None, P).unwrap().h;
        for _ in 0..5 {
            let u0 = [rng.gen_range(-10.0..10.0)];
            let h = minimize_h_u(&m, 0.0, &[0.4], &[0.9], &[0.1], &u0, None, P).unwrap().h;
            assert!((h - h0).abs() < 1e-8);
        }
    }

    #[test]
    fn convexity_probe_verdicts() {
        let region = SampleRegion::cube(1, 1, 3.0).with_controls(vec![-3.0], vec![3.0]);
        let r = convexity_probe(&lq(-1.0, 1.0, 1.0), &region, 10_000, 1).unwrap();
        assert!(r.holds && r.witness.is_none());
        let concave = ControlledDiffusion::builder("concave", 1, 1)
            .drift_1d(|_, x, u| -x + u)
            .diffusion_1d(|_, _, _| 1.0)
            .cost_1d(|_, x, u| -x.powi(4) + u * u)
            .build()
            .unwrap();
        let r = convexity_probe(&concave, &region, 1000, 1).unwrap();
        assert!(!r.holds && r.witness.is_some());
    }
}
