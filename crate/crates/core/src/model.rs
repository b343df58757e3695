//! Controlled diffusion models and sampling-based checks of their structural
//! assumptions (strong dissipativity, ellipticity, Lipschitz and growth
//! constants).
//!
//! Coefficients are black-box closures, so every check here is a certificate
//! over a declared [`SampleRegion`] rather than a global proof. Reports carry
//! the region and the seed so every reported constant can be regenerated.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::stream_rng;

/// `f(t, x, u, out)`: vector- or matrix-valued coefficient written into `out`.
pub type VecFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `f(t, x, u)`: scalar coefficient.
pub type ScalarFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Optional analytic derivatives. Layouts (row-major):
/// - `drift_x`: n × n, `out[i*n + j] = ∂b_i/∂x_j`
/// - `diffusion_x`: n × n × n, `out[(i*n + j)*n + l] = ∂σ_ij/∂x_l`
/// - `cost_x`: n
/// - `drift_u`: n × m, `diffusion_u`: n × n × m, `cost_u`: m
#[derive(Clone, Default)]
pub struct AnalyticGradients {
    pub drift_x: Option<VecFn>,
    pub diffusion_x: Option<VecFn>,
    pub cost_x: Option<VecFn>,
    pub drift_u: Option<VecFn>,
    pub diffusion_u: Option<VecFn>,
    pub cost_u: Option<VecFn>,
}

/// Structural constants declared alongside a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    /// Dissipativity rate `k > 0`, absent when the drift is not dissipative.
    pub k: Option<f64>,
    /// Lower bound on the smallest singular value of σ, so `‖σ⁻¹‖ ≤ 1/sigma_lo`.
    pub sigma_lo: Option<f64>,
    /// Upper bound on `‖σ‖ + ‖σ⁻¹‖`.
    pub sigma_hi: Option<f64>,
    /// Lipschitz constant ω of σ in x.
    pub sigma_lipschitz: Option<f64>,
    /// Bound `C` on `‖∇ₓL‖`; absent when the gradient is unbounded.
    pub grad_cost_bound: Option<f64>,
    /// Bound on `‖b(t, 0, u)‖`.
    pub drift_at_zero_bound: Option<f64>,
}

/// Whether a missing analytic gradient may be replaced by centered
/// finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientPolicy {
    AnalyticOnly,
    AllowFiniteDifference,
}

/// The controlled SDE `dX = b(t,X,u)dt + σ(t,X,u)dW` with running cost `L`.
#[derive(Clone)]
pub struct ControlledDiffusion {
    pub name: String,
    state_dim: usize,
    control_dim: usize,
    drift: VecFn,
    diffusion: VecFn,
    cost: ScalarFn,
    gradients: AnalyticGradients,
    pub constants: DeclaredConstants,
    pub period: Option<f64>,
}

impl fmt::Debug for ControlledDiffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlledDiffusion")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("constants", &self.constants)
            .field("period", &self.period)
            .finish_non_exhaustive()
    }
}

pub struct ModelBuilder {
    name: String,
    n: usize,
    m: usize,
    drift: Option<VecFn>,
    diffusion: Option<VecFn>,
    cost: Option<ScalarFn>,
    gradients: AnalyticGradients,
    constants: DeclaredConstants,
    period: Option<f64>,
}

impl ModelBuilder {
    pub fn drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn diffusion(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    pub fn cost(mut self, f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.cost = Some(Arc::new(f));
        self
    }

    /// Scalar drift `b(t, x, u)` for one-dimensional models (first control component).
    pub fn drift_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift(move |t, x, u, out| out[0] = f(t, x[0], first(u)))
    }

    pub fn diffusion_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion(move |t, x, u, out| out[0] = f(t, x[0], first(u)))
    }

    pub fn cost_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.cost(move |t, x, u| f(t, x[0], first(u)))
    }

    pub fn drift_x(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradients.drift_x = Some(Arc::new(f));
        self
    }

    pub fn diffusion_x(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.gradients.diffusion_x = Some(Arc::new(f));
        self
    }

    pub fn cost_x(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradients.cost_x = Some(Arc::new(f));
        self
    }

    pub fn drift_u(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradients.drift_u = Some(Arc::new(f));
        self
    }

    pub fn diffusion_u(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.gradients.diffusion_u = Some(Arc::new(f));
        self
    }

    pub fn cost_u(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradients.cost_u = Some(Arc::new(f));
        self
    }

    pub fn drift_x_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift_x(move |t, x, u, out| out[0] = f(t, x[0], first(u)))
    }

    pub fn diffusion_x_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion_x(move |t, x, u, out| out[0] = f(t, x[0], first(u)))
    }

    pub fn cost_x_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.cost_x(move |t, x, u, out| out[0] = f(t, x[0], first(u)))
    }

    pub fn drift_u_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift_u(move |t, x, u, out| out[0] = f(t, x[0], first(u)))
    }

    pub fn diffusion_u_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion_u(move |t, x, u, out| out[0] = f(t, x[0], first(u)))
    }

    pub fn cost_u_1d(self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.cost_u(move |t, x, u, out| out[0] = f(t, x[0], first(u)))
    }

    pub fn constants(mut self, c: DeclaredConstants) -> Self {
        self.constants = c;
        self
    }

    pub fn period(mut self, period: f64) -> Self {
        self.period = Some(period);
        self
    }

    pub fn build(self) -> Result<ControlledDiffusion> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidArgument(
                "state and control dimensions must be positive".into(),
            ));
        }
        if let Some(p) = self.period {
            if !(p > 0.0) {
                return Err(Error::InvalidArgument(format!("period must be positive, got {p}")));
            }
        }
        Ok(ControlledDiffusion {
            name: self.name,
            state_dim: self.n,
            control_dim: self.m,
            drift: self.drift.unwrap_or_else(|| Arc::new(|_, _, _, out| out.fill(0.0))),
            diffusion: self.diffusion.unwrap_or_else(|| Arc::new(|_, _, _, out| out.fill(0.0))),
            cost: self.cost.unwrap_or_else(|| Arc::new(|_, _, _| 0.0)),
            gradients: self.gradients,
            constants: self.constants,
            period: self.period,
        })
    }
}

fn first(u: &[f64]) -> f64 {
    u.first().copied().unwrap_or(0.0)
}

impl ControlledDiffusion {
    pub fn builder(name: impl Into<String>, state_dim: usize, control_dim: usize) -> ModelBuilder {
        ModelBuilder {
            name: name.into(),
            n: state_dim,
            m: control_dim,
            drift: None,
            diffusion: None,
            cost: None,
            gradients: AnalyticGradients::default(),
            constants: DeclaredConstants::default(),
            period: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, u, out)
    }

    #[inline]
    pub fn diffusion_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, u, out)
    }

    #[inline]
    pub fn cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.cost)(t, x, u)
    }

    pub fn drift(&self, t: f64, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let mut out = vec![0.0; self.state_dim];
        self.drift_into(t, x, u, &mut out);
        finite_or(&out, "drift", t, x, u)?;
        Ok(out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let mut out = vec![0.0; self.state_dim * self.state_dim];
        self.diffusion_into(t, x, u, &mut out);
        finite_or(&out, "diffusion", t, x, u)?;
        Ok(out)
    }

    pub fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> Result<f64> {
        self.check_dims(x, u)?;
        let l = self.cost(t, x, u);
        finite_or(&[l], "running cost", t, x, u)?;
        Ok(l)
    }

    pub fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim || u.len() != self.control_dim {
            return Err(Error::Dimension(format!(
                "model {} expects x in R^{} and u in R^{}, got {} and {}",
                self.name,
                self.state_dim,
                self.control_dim,
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    pub fn has_analytic_state_gradients(&self) -> bool {
        self.gradients.drift_x.is_some()
            && self.gradients.diffusion_x.is_some()
            && self.gradients.cost_x.is_some()
    }

    pub fn analytic(&self) -> &AnalyticGradients {
        &self.gradients
    }

    /// `∇ₓb`, n × n.
    pub fn drift_jacobian_x(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        policy: GradientPolicy,
        out: &mut [f64],
    ) -> Result<()> {
        match (&self.gradients.drift_x, policy) {
            (Some(f), _) => f(t, x, u, out),
            (None, GradientPolicy::AllowFiniteDifference) => {
                fd_vec_x(&self.drift, self.state_dim, t, x, u, None, out)
            }
            (None, GradientPolicy::AnalyticOnly) => return Err(Error::MissingGradient("∇ₓb")),
        }
        Ok(())
    }

    /// `∇ₓσ`, n × n × n.
    pub fn diffusion_jacobian_x(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        policy: GradientPolicy,
        out: &mut [f64],
    ) -> Result<()> {
        match (&self.gradients.diffusion_x, policy) {
            (Some(f), _) => f(t, x, u, out),
            (None, GradientPolicy::AllowFiniteDifference) => {
                let n = self.state_dim;
                fd_vec_x(&self.diffusion, n * n, t, x, u, None, out)
            }
            (None, GradientPolicy::AnalyticOnly) => return Err(Error::MissingGradient("∇ₓσ")),
        }
        Ok(())
    }

    /// `∇ₓL`, length n.
    pub fn cost_gradient_x(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        policy: GradientPolicy,
        out: &mut [f64],
    ) -> Result<()> {
        match (&self.gradients.cost_x, policy) {
            (Some(f), _) => f(t, x, u, out),
            (None, GradientPolicy::AllowFiniteDifference) => {
                fd_scalar_x(&self.cost, t, x, u, None, out)
            }
            (None, GradientPolicy::AnalyticOnly) => return Err(Error::MissingGradient("∇ₓL")),
        }
        Ok(())
    }

    /// `∇ᵤb`, n × m.
    pub fn drift_jacobian_u(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        policy: GradientPolicy,
        out: &mut [f64],
    ) -> Result<()> {
        match (&self.gradients.drift_u, policy) {
            (Some(f), _) => f(t, x, u, out),
            (None, GradientPolicy::AllowFiniteDifference) => {
                fd_vec_u(&self.drift, self.state_dim, t, x, u, None, out)
            }
            (None, GradientPolicy::AnalyticOnly) => return Err(Error::MissingGradient("∇ᵤb")),
        }
        Ok(())
    }

    /// `∇ᵤσ`, n × n × m.
    pub fn diffusion_jacobian_u(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        policy: GradientPolicy,
        out: &mut [f64],
    ) -> Result<()> {
        match (&self.gradients.diffusion_u, policy) {
            (Some(f), _) => f(t, x, u, out),
            (None, GradientPolicy::AllowFiniteDifference) => {
                let n = self.state_dim;
                fd_vec_u(&self.diffusion, n * n, t, x, u, None, out)
            }
            (None, GradientPolicy::AnalyticOnly) => return Err(Error::MissingGradient("∇ᵤσ")),
        }
        Ok(())
    }

    /// `∇ᵤL`, length m.
    pub fn cost_gradient_u(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        policy: GradientPolicy,
        out: &mut [f64],
    ) -> Result<()> {
        match (&self.gradients.cost_u, policy) {
            (Some(f), _) => f(t, x, u, out),
            (None, GradientPolicy::AllowFiniteDifference) => {
                fd_scalar_u(&self.cost, t, x, u, None, out)
            }
            (None, GradientPolicy::AnalyticOnly) => return Err(Error::MissingGradient("∇ᵤL")),
        }
        Ok(())
    }

    /// Same model with `L` replaced by `scale * L + shift`; analytic cost
    /// gradients are rescaled accordingly.
    pub fn with_affine_cost(&self, scale: f64, shift: f64) -> ControlledDiffusion {
        let mut m = self.clone();
        let cost = self.cost.clone();
        m.cost = Arc::new(move |t, x, u| scale * cost(t, x, u) + shift);
        if let Some(g) = self.gradients.cost_x.clone() {
            m.gradients.cost_x = Some(Arc::new(move |t, x, u, out: &mut [f64]| {
                g(t, x, u, out);
                out.iter_mut().for_each(|v| *v *= scale);
            }));
        }
        if let Some(g) = self.gradients.cost_u.clone() {
            m.gradients.cost_u = Some(Arc::new(move |t, x, u, out: &mut [f64]| {
                g(t, x, u, out);
                out.iter_mut().for_each(|v| *v *= scale);
            }));
        }
        if let Some(c) = m.constants.grad_cost_bound.as_mut() {
            *c *= scale.abs();
        }
        m
    }
}

fn finite_or(vals: &[f64], what: &'static str, t: f64, x: &[f64], u: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, t, x: x.to_vec(), u: u.to_vec() })
    }
}

/// Default centered-difference step `1e-5 (1 + |v|)`.
pub fn default_step(v: &[f64]) -> f64 {
    1e-5 * (1.0 + linalg::norm(v))
}

// Output layout: out[k * dim_x + l] = ∂f_k/∂x_l.
fn fd_vec_x(f: &VecFn, len: usize, t: f64, x: &[f64], u: &[f64], h: Option<f64>, out: &mut [f64]) {
    let n = x.len();
    let h = h.unwrap_or_else(|| default_step(x));
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; len];
    let mut fm = vec![0.0; len];
    for l in 0..n {
        xp[l] = x[l] + h;
        f(t, &xp, u, &mut fp);
        xp[l] = x[l] - h;
        f(t, &xp, u, &mut fm);
        xp[l] = x[l];
        for k in 0..len {
            out[k * n + l] = (fp[k] - fm[k]) / (2.0 * h);
        }
    }
}

fn fd_vec_u(f: &VecFn, len: usize, t: f64, x: &[f64], u: &[f64], h: Option<f64>, out: &mut [f64]) {
    let m = u.len();
    let h = h.unwrap_or_else(|| default_step(u));
    let mut up = u.to_vec();
    let mut fp = vec![0.0; len];
    let mut fm = vec![0.0; len];
    for l in 0..m {
        up[l] = u[l] + h;
        f(t, x, &up, &mut fp);
        up[l] = u[l] - h;
        f(t, x, &up, &mut fm);
        up[l] = u[l];
        for k in 0..len {
            out[k * m + l] = (fp[k] - fm[k]) / (2.0 * h);
        }
    }
}

fn fd_scalar_x(f: &ScalarFn, t: f64, x: &[f64], u: &[f64], h: Option<f64>, out: &mut [f64]) {
    let h = h.unwrap_or_else(|| default_step(x));
    let mut xp = x.to_vec();
    for l in 0..x.len() {
        xp[l] = x[l] + h;
        let fp = f(t, &xp, u);
        xp[l] = x[l] - h;
        let fm = f(t, &xp, u);
        xp[l] = x[l];
        out[l] = (fp - fm) / (2.0 * h);
    }
}

fn fd_scalar_u(f: &ScalarFn, t: f64, x: &[f64], u: &[f64], h: Option<f64>, out: &mut [f64]) {
    let h = h.unwrap_or_else(|| default_step(u));
    let mut up = u.to_vec();
    for l in 0..u.len() {
        up[l] = u[l] + h;
        let fp = f(t, x, &up);
        up[l] = u[l] - h;
        let fm = f(t, x, &up);
        up[l] = u[l];
        out[l] = (fp - fm) / (2.0 * h);
    }
}

/// All first derivatives of the coefficients at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub drift_x: Vec<f64>,
    pub diffusion_x: Vec<f64>,
    pub cost_x: Vec<f64>,
    pub drift_u: Vec<f64>,
    pub diffusion_u: Vec<f64>,
    pub cost_u: Vec<f64>,
}

/// Centered finite differences of every coefficient at `(t, x, u)`.
///
/// `h = None` selects `1e-5 (1 + |x|)` for state derivatives and
/// `1e-5 (1 + |u|)` for control derivatives. Truncation error is `O(h²)`.
pub fn finite_difference_gradients(
    model: &ControlledDiffusion,
    t: f64,
    x: &[f64],
    u: &[f64],
    h: Option<f64>,
) -> Result<GradientBundle> {
    model.check_dims(x, u)?;
    if let Some(h) = h {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
        }
    }
    let n = model.state_dim;
    let m = model.control_dim;
    let mut g = GradientBundle {
        drift_x: vec![0.0; n * n],
        diffusion_x: vec![0.0; n * n * n],
        cost_x: vec![0.0; n],
        drift_u: vec![0.0; n * m],
        diffusion_u: vec![0.0; n * n * m],
        cost_u: vec![0.0; m],
    };
    fd_vec_x(&model.drift, n, t, x, u, h, &mut g.drift_x);
    fd_vec_x(&model.diffusion, n * n, t, x, u, h, &mut g.diffusion_x);
    fd_scalar_x(&model.cost, t, x, u, h, &mut g.cost_x);
    fd_vec_u(&model.drift, n, t, x, u, h, &mut g.drift_u);
    fd_vec_u(&model.diffusion, n * n, t, x, u, h, &mut g.diffusion_u);
    fd_scalar_u(&model.cost, t, x, u, h, &mut g.cost_u);
    for (vals, what) in [
        (&g.drift_x, "drift gradient"),
        (&g.diffusion_x, "diffusion gradient"),
        (&g.cost_x, "cost gradient"),
        (&g.drift_u, "drift control gradient"),
        (&g.diffusion_u, "diffusion control gradient"),
        (&g.cost_u, "cost control gradient"),
    ] {
        finite_or(vals, what, t, x, u)?;
    }
    Ok(g)
}

/// Axis-aligned region over which assumption checks sample `(t, x, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRegion {
    pub time: (f64, f64),
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
}

impl SampleRegion {
    /// State box `[lo, hi]`, time `[0, 1]`, controls fixed at zero.
    pub fn new(state_lo: Vec<f64>, state_hi: Vec<f64>, control_dim: usize) -> Self {
        SampleRegion {
            time: (0.0, 1.0),
            state_lo,
            state_hi,
            control_lo: vec![0.0; control_dim],
            control_hi: vec![0.0; control_dim],
        }
    }

    /// Symmetric cube `[-half, half]^n`.
    pub fn cube(n: usize, control_dim: usize, half: f64) -> Self {
        Self::new(vec![-half; n], vec![half; n], control_dim)
    }

    pub fn with_controls(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.control_lo = lo;
        self.control_hi = hi;
        self
    }

    pub fn with_time(mut self, t0: f64, t1: f64) -> Self {
        self.time = (t0, t1);
        self
    }

    pub fn diameter(&self) -> f64 {
        let d: Vec<f64> = self.state_hi.iter().zip(&self.state_lo).map(|(h, l)| h - l).collect();
        linalg::norm(&d)
    }

    fn validate(&self, model: &ControlledDiffusion) -> Result<()> {
        let n = model.state_dim();
        let m = model.control_dim();
        if self.state_lo.len() != n
            || self.state_hi.len() != n
            || self.control_lo.len() != m
            || self.control_hi.len() != m
        {
            return Err(Error::Dimension("sample region does not match model dimensions".into()));
        }
        if self.state_lo.iter().zip(&self.state_hi).any(|(l, h)| l > h)
            || self.control_lo.iter().zip(&self.control_hi).any(|(l, h)| l > h)
            || self.time.0 > self.time.1
        {
            return Err(Error::InvalidArgument("sample region has inverted bounds".into()));
        }
        Ok(())
    }

    pub fn sample_time<R: Rng>(&self, rng: &mut R) -> f64 {
        uniform(rng, self.time.0, self.time.1)
    }

    pub fn sample_state<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.state_lo.iter().zip(&self.state_hi).map(|(l, h)| uniform(rng, *l, *h)).collect()
    }

    pub fn sample_control<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.control_lo.iter().zip(&self.control_hi).map(|(l, h)| uniform(rng, *l, *h)).collect()
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn unit_direction<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = linalg::norm(&d);
        if norm > 1e-12 {
            return d.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Log-uniform radius in `[1e-3, max(diam, 2e-3)]`.
fn log_uniform_radius<R: Rng>(rng: &mut R, diam: f64) -> f64 {
    let lo = 1e-3f64.ln();
    let hi = diam.max(2e-3).ln();
    rng.gen_range(lo..hi).exp()
}

/// A sampled point `(t, x, u)` with the value that made it noteworthy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub value: f64,
}

/// A sampled pair `(t, x, y, u)` with its dissipativity quotient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub quotient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipativityReport {
    pub holds: bool,
    /// Conservative rate: the smaller of the two forms.
    pub k_hat: f64,
    /// `-max ⟨b(x)-b(y), x-y⟩/‖x-y‖²` over sampled pairs.
    pub k_pairwise: f64,
    /// `-max λ_max((∇ₓb + ∇ₓbᵀ)/2)` over sampled points.
    pub k_gradient: f64,
    /// `|k_pairwise - k_gradient| / max(|k_pairwise|, |k_gradient|)`.
    pub relative_gap: f64,
    pub forms_agree: bool,
    pub pair_witness: PairWitness,
    pub gradient_witness: PointWitness,
    pub n_samples: usize,
    pub seed: u64,
}

/// Sample-based strong dissipativity certificate in both the pairwise
/// inner-product form and the symmetric-gradient form.
pub fn check_dissipativity(
    model: &ControlledDiffusion,
    region: &SampleRegion,
    n_samples: usize,
    seed: u64,
) -> Result<DissipativityReport> {
    region.validate(model)?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let n = model.state_dim();
    let mut rng = stream_rng(seed);
    let diam = region.diameter();
    let mut bx = vec![0.0; n];
    let mut by = vec![0.0; n];
    let mut jac = vec![0.0; n * n];

    let mut pair_best: Option<PairWitness> = None;
    let mut grad_best: Option<PointWitness> = None;
    for _ in 0..n_samples {
        let t = region.sample_time(&mut rng);
        let x = region.sample_state(&mut rng);
        let u = region.sample_control(&mut rng);
        let r = log_uniform_radius(&mut rng, diam);
        let d = unit_direction(&mut rng, n);
        let y: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + r * di).collect();

        model.drift_into(t, &x, &u, &mut bx);
        finite_or(&bx, "drift", t, &x, &u)?;
        model.drift_into(t, &y, &u, &mut by);
        finite_or(&by, "drift", t, &y, &u)?;
        let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let db: Vec<f64> = bx.iter().zip(&by).map(|(a, b)| a - b).collect();
        let q = linalg::dot(&db, &diff) / linalg::dot(&diff, &diff);
        if pair_best.as_ref().is_none_or(|w| q > w.quotient) {
            pair_best = Some(PairWitness { t, x: x.clone(), y, u: u.clone(), quotient: q });
        }

        model.drift_jacobian_x(t, &x, &u, GradientPolicy::AllowFiniteDifference, &mut jac)?;
        finite_or(&jac, "drift gradient", t, &x, &u)?;
        let lam = linalg::max_symmetric_part_eigenvalue(&jac, n);
        if grad_best.as_ref().is_none_or(|w| lam > w.value) {
            grad_best = Some(PointWitness { t, x, u, value: lam });
        }
    }
    let pair_witness = pair_best.expect("n_samples >= 1");
    let gradient_witness = grad_best.expect("n_samples >= 1");
    let k_pairwise = -pair_witness.quotient;
    let k_gradient = -gradient_witness.value;
    let scale = k_pairwise.abs().max(k_gradient.abs());
    let relative_gap = if scale > 0.0 { (k_pairwise - k_gradient).abs() / scale } else { 0.0 };
    Ok(DissipativityReport {
        holds: k_pairwise > 0.0 && k_gradient > 0.0,
        k_hat: k_pairwise.min(k_gradient),
        k_pairwise,
        k_gradient,
        relative_gap,
        forms_agree: relative_gap <= 0.1,
        pair_witness,
        gradient_witness,
        n_samples,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub holds: bool,
    /// `min ‖σ‖ + ‖σ⁻¹‖` over samples (spectral norms).
    pub sigma_lo_hat: f64,
    /// `max ‖σ‖ + ‖σ⁻¹‖` over samples.
    pub sigma_hi_hat: f64,
    pub norm_min: f64,
    pub norm_max: f64,
    pub inverse_norm_min: f64,
    pub inverse_norm_max: f64,
    /// Smallest singular value seen, i.e. `1 / inverse_norm_max`.
    pub min_singular_value: f64,
    pub max_condition: f64,
    pub singular_witness: Option<PointWitness>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Condition number above which a sampled σ counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

pub fn check_ellipticity(
    model: &ControlledDiffusion,
    region: &SampleRegion,
    n_samples: usize,
    seed: u64,
) -> Result<EllipticityReport> {
    region.validate(model)?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let n = model.state_dim();
    let mut rng = stream_rng(seed);
    let mut sig = vec![0.0; n * n];
    let mut rep = EllipticityReport {
        holds: true,
        sigma_lo_hat: f64::INFINITY,
        sigma_hi_hat: 0.0,
        norm_min: f64::INFINITY,
        norm_max: 0.0,
        inverse_norm_min: f64::INFINITY,
        inverse_norm_max: 0.0,
        min_singular_value: f64::INFINITY,
        max_condition: 0.0,
        singular_witness: None,
        n_samples,
        seed,
    };
    for _ in 0..n_samples {
        let t = region.sample_time(&mut rng);
        let x = region.sample_state(&mut rng);
        let u = region.sample_control(&mut rng);
        model.diffusion_into(t, &x, &u, &mut sig);
        finite_or(&sig, "diffusion", t, &x, &u)?;
        let sv = linalg::singular_values(&sig, n);
        let smin = sv[0];
        let smax = sv[n - 1];
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        rep.max_condition = rep.max_condition.max(cond);
        if !(cond <= SINGULAR_CONDITION) {
            rep.holds = false;
            if rep.singular_witness.is_none() {
                rep.singular_witness = Some(PointWitness { t, x, u, value: cond });
            }
            rep.min_singular_value = rep.min_singular_value.min(smin);
            rep.inverse_norm_max = f64::INFINITY;
            continue;
        }
        let inv = 1.0 / smin;
        let sum = smax + inv;
        rep.sigma_lo_hat = rep.sigma_lo_hat.min(sum);
        rep.sigma_hi_hat = rep.sigma_hi_hat.max(sum);
        rep.norm_min = rep.norm_min.min(smax);
        rep.norm_max = rep.norm_max.max(smax);
        rep.inverse_norm_min = rep.inverse_norm_min.min(inv);
        rep.inverse_norm_max = rep.inverse_norm_max.max(inv);
        rep.min_singular_value = rep.min_singular_value.min(smin);
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub radius: f64,
    pub horizon: f64,
    /// Local Lipschitz constant `K(N, T)` of `(b, σ)` in x.
    pub k_hat: f64,
    /// Linear growth constant `K̄`: `max (|b| + |σ|) / (1 + |x|)`.
    pub kbar_hat: f64,
    /// Lipschitz constant ω of σ in x.
    pub omega_hat: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Lipschitz and linear-growth estimates on the ball of radius `radius`
/// over `t ∈ [0, horizon]`. Matrix norms are Frobenius.
pub fn check_growth_lipschitz(
    model: &ControlledDiffusion,
    radius: f64,
    horizon: f64,
    controls: (&[f64], &[f64]),
    n_samples: usize,
    seed: u64,
) -> Result<GrowthReport> {
    if !(radius > 0.0) || horizon < 0.0 || n_samples == 0 {
        return Err(Error::InvalidArgument(
            "radius must be positive, horizon non-negative, n_samples >= 1".into(),
        ));
    }
    let n = model.state_dim();
    if controls.0.len() != model.control_dim() || controls.1.len() != model.control_dim() {
        return Err(Error::Dimension("control box does not match control dimension".into()));
    }
    let mut rng = stream_rng(seed);
    let mut bx = vec![0.0; n];
    let mut by = vec![0.0; n];
    let mut sx = vec![0.0; n * n];
    let mut sy = vec![0.0; n * n];
    let (mut k_hat, mut kbar_hat, mut omega_hat) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n_samples {
        let t = uniform(&mut rng, 0.0, horizon);
        let u: Vec<f64> =
            controls.0.iter().zip(controls.1).map(|(l, h)| uniform(&mut rng, *l, *h)).collect();
        // Uniform point in the ball.
        let dir = unit_direction(&mut rng, n);
        let rad = radius * rng.gen::<f64>().powf(1.0 / n as f64);
        let x: Vec<f64> = dir.iter().map(|d| rad * d).collect();
        let r = log_uniform_radius(&mut rng, 2.0 * radius);
        let d = unit_direction(&mut rng, n);
        let mut step = r;
        let mut y: Vec<f64>;
        let mut sign = 1.0;
        loop {
            y = x.iter().zip(&d).map(|(xi, di)| xi + sign * step * di).collect();
            if linalg::norm(&y) <= radius {
                break;
            }
            if sign > 0.0 {
                sign = -1.0;
            } else {
                sign = 1.0;
                step *= 0.5;
            }
        }

        model.drift_into(t, &x, &u, &mut bx);
        model.drift_into(t, &y, &u, &mut by);
        model.diffusion_into(t, &x, &u, &mut sx);
        model.diffusion_into(t, &y, &u, &mut sy);
        finite_or(&bx, "drift", t, &x, &u)?;
        finite_or(&by, "drift", t, &y, &u)?;
        finite_or(&sx, "diffusion", t, &x, &u)?;
        finite_or(&sy, "diffusion", t, &y, &u)?;
        let dist = linalg::norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
        let db = linalg::norm(&bx.iter().zip(&by).map(|(a, b)| a - b).collect::<Vec<_>>());
        let ds = linalg::frobenius(&sx.iter().zip(&sy).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dist > 0.0 {
            k_hat = k_hat.max((db + ds) / dist);
            omega_hat = omega_hat.max(ds / dist);
        }
        let growth = (linalg::norm(&bx) + linalg::frobenius(&sx)) / (1.0 + linalg::norm(&x));
        kbar_hat = kbar_hat.max(growth);
    }
    Ok(GrowthReport { radius, horizon, k_hat, kbar_hat, omega_hat, n_samples, seed })
}

/// Largest relative disagreement between supplied analytic gradients and
/// centered finite differences over random points of `region`.
/// Relative error is `|a - f| / max(1, |a|)`, taken entrywise.
pub fn gradient_agreement(
    model: &ControlledDiffusion,
    region: &SampleRegion,
    n_points: usize,
    seed: u64,
) -> Result<f64> {
    region.validate(model)?;
    let n = model.state_dim();
    let m = model.control_dim();
    let mut rng = stream_rng(seed);
    let mut worst = 0.0f64;
    let g = &model.gradients;
    let slots: [(&Option<VecFn>, usize); 6] = [
        (&g.drift_x, n * n),
        (&g.diffusion_x, n * n * n),
        (&g.cost_x, n),
        (&g.drift_u, n * m),
        (&g.diffusion_u, n * n * m),
        (&g.cost_u, m),
    ];
    for _ in 0..n_points {
        let t = region.sample_time(&mut rng);
        let x = region.sample_state(&mut rng);
        let u = region.sample_control(&mut rng);
        let fd = finite_difference_gradients(model, t, &x, &u, None)?;
        let fd_slices = [
            &fd.drift_x,
            &fd.diffusion_x,
            &fd.cost_x,
            &fd.drift_u,
            &fd.diffusion_u,
            &fd.cost_u,
        ];
        for ((slot, len), fd_vals) in slots.iter().zip(fd_slices) {
            if let Some(f) = slot {
                let mut out = vec![0.0; *len];
                f(t, &x, &u, &mut out);
                for (a, b) in out.iter().zip(fd_vals.iter()) {
                    worst = worst.max((a - b).abs() / a.abs().max(1.0));
                }
            }
        }
    }
    Ok(worst)
}

/// Largest violation of `f(t + T*, ·, ·) = f(t, ·, ·)` for b, σ and L at
/// sampled points, or `None` for aperiodic models.
pub fn check_periodicity(
    model: &ControlledDiffusion,
    region: &SampleRegion,
    n_samples: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let Some(period) = model.period else { return Ok(None) };
    region.validate(model)?;
    let n = model.state_dim();
    let mut rng = stream_rng(seed);
    let mut worst = 0.0f64;
    let (mut b0, mut b1) = (vec![0.0; n], vec![0.0; n]);
    let (mut s0, mut s1) = (vec![0.0; n * n], vec![0.0; n * n]);
    for _ in 0..n_samples {
        let t = region.sample_time(&mut rng);
        let x = region.sample_state(&mut rng);
        let u = region.sample_control(&mut rng);
        model.drift_into(t, &x, &u, &mut b0);
        model.drift_into(t + period, &x, &u, &mut b1);
        model.diffusion_into(t, &x, &u, &mut s0);
        model.diffusion_into(t + period, &x, &u, &mut s1);
        let dl = (model.cost(t, &x, &u) - model.cost(t + period, &x, &u)).abs();
        let db = b0.iter().zip(&b1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ds = s0.iter().zip(&s1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(dl).max(db).max(ds);
    }
    Ok(Some(worst))
}

/// Everything the model checks measured, reproducible from `(region, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub model: String,
    pub region: SampleRegion,
    pub n_samples: usize,
    pub seed: u64,
    pub dissipativity: DissipativityReport,
    pub ellipticity: EllipticityReport,
    pub lipschitz_growth: GrowthReport,
    /// Lipschitz estimate ω̂ of σ(t, ·, u).
    pub sigma_lipschitz: f64,
    /// `sup ‖∇ₓL‖` over the samples.
    pub cost_gradient_bound_hat: f64,
    /// `sup ‖b(t, 0, u)‖` over the samples.
    pub drift_at_zero_hat: f64,
    /// Worst analytic-vs-finite-difference disagreement, if any analytic
    /// gradient is supplied.
    pub gradient_agreement: Option<f64>,
    pub periodicity_defect: Option<f64>,
}

impl AssumptionReport {
    /// All structural checks that gate later stages passed.
    pub fn passed(&self) -> bool {
        self.dissipativity.holds && self.ellipticity.holds
    }
}

/// Run every model check over one region with sub-seeds derived from `seed`.
pub fn check_assumptions(
    model: &ControlledDiffusion,
    region: &SampleRegion,
    n_samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    use crate::rng::substream;
    let dissipativity = check_dissipativity(model, region, n_samples, substream(seed, "dissipativity"))?;
    let ellipticity = check_ellipticity(model, region, n_samples, substream(seed, "ellipticity"))?;
    let radius = region
        .state_lo
        .iter()
        .zip(&region.state_hi)
        .map(|(l, h)| l.abs().max(h.abs()).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(1e-3);
    let growth = check_growth_lipschitz(
        model,
        radius,
        region.time.1,
        (&region.control_lo, &region.control_hi),
        n_samples,
        substream(seed, "growth"),
    )?;

    let n = model.state_dim();
    let mut rng = stream_rng(substream(seed, "cost-gradient"));
    let mut grad = vec![0.0; n];
    let mut b0 = vec![0.0; n];
    let zero = vec![0.0; n];
    let (mut cgrad, mut bzero) = (0.0f64, 0.0f64);
    for _ in 0..n_samples {
        let t = region.sample_time(&mut rng);
        let x = region.sample_state(&mut rng);
        let u = region.sample_control(&mut rng);
        model.cost_gradient_x(t, &x, &u, GradientPolicy::AllowFiniteDifference, &mut grad)?;
        finite_or(&grad, "cost gradient", t, &x, &u)?;
        cgrad = cgrad.max(linalg::norm(&grad));
        model.drift_into(t, &zero, &u, &mut b0);
        bzero = bzero.max(linalg::norm(&b0));
    }
    let has_analytic = {
        let g = &model.gradients;
        g.drift_x.is_some()
            || g.diffusion_x.is_some()
            || g.cost_x.is_some()
            || g.drift_u.is_some()
            || g.diffusion_u.is_some()
            || g.cost_u.is_some()
    };
    let gradient_agreement = if has_analytic {
        Some(gradient_agreement(model, region, 100, substream(seed, "gradients"))?)
    } else {
        None
    };
    let periodicity_defect =
        check_periodicity(model, region, n_samples.min(1000), substream(seed, "period"))?;
    Ok(AssumptionReport {
        model: model.name.clone(),
        region: region.clone(),
        n_samples,
        seed,
        sigma_lipschitz: growth.omega_hat,
        dissipativity,
        ellipticity,
        lipschitz_growth: growth,
        cost_gradient_bound_hat: cgrad,
        drift_at_zero_hat: bzero,
        gradient_agreement,
        periodicity_defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drift_model(b: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ControlledDiffusion {
        ControlledDiffusion::builder("test", 1, 1)
            .drift_1d(move |_, x, _| b(x))
            .diffusion_1d(|_, _, _| 1.0)
            .build()
            .unwrap()
    }

    #[test]
    fn linear_contraction_has_exact_rate() {
        let m = drift_model(|x| -2.0 * x);
        let r = check_dissipativity(&m, &SampleRegion::cube(1, 1, 5.0), 2000, 1).unwrap();
        assert!(r.holds);
        assert!((r.k_hat - 2.0).abs() < 1e-6, "{}", r.k_hat);
    }

    #[test]
    fn expanding_drift_fails_with_witness() {
        let m = drift_model(|x| x);
        let r = check_dissipativity(&m, &SampleRegion::cube(1, 1, 5.0), 500, 2).unwrap();
        assert!(!r.holds);
        assert!((r.k_pairwise + 1.0).abs() < 1e-9);
        assert!((r.k_gradient + 1.0).abs() < 1e-6);
        assert_ne!(r.pair_witness.x, r.pair_witness.y);
    }

    #[test]
    fn sine_perturbed_drift_rate() {
        let m = drift_model(|x| -x + 0.5 * x.sin());
        let r = check_dissipativity(&m, &SampleRegion::cube(1, 1, 5.0), 20_000, 3).unwrap();
        assert!(r.holds);
        assert!((r.k_hat - 0.5).abs() < 0.01, "{}", r.k_hat);
        assert!(r.forms_agree);
    }

    #[test]
    fn non_finite_drift_is_reported() {
        let m = drift_model(|x| if x > 4.0 { f64::NAN } else { -x });
        let err = check_dissipativity(&m, &SampleRegion::cube(1, 1, 5.0), 2000, 4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { what: "drift", .. }), "{err}");
    }

    #[test]
    fn identity_diffusion_norm_sum_is_two() {
        let m = ControlledDiffusion::builder("id", 2, 1)
            .diffusion(|_, _, _, s| {
                s.fill(0.0);
                s[0] = 1.0;
                s[3] = 1.0;
            })
            .build()
            .unwrap();
        let r = check_ellipticity(&m, &SampleRegion::cube(2, 1, 1.0), 50, 5).unwrap();
        assert!(r.holds);
        assert!((r.sigma_lo_hat - 2.0).abs() < 1e-12 && (r.sigma_hi_hat - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_diffusion_norms() {
        let m = ControlledDiffusion::builder("diag", 2, 1)
            .diffusion(|_, _, _, s| {
                s.fill(0.0);
                s[0] = 1.0;
                s[3] = 2.0;
            })
            .build()
            .unwrap();
        let r = check_ellipticity(&m, &SampleRegion::cube(2, 1, 1.0), 50, 6).unwrap();
        assert!((r.norm_max - 2.0).abs() < 1e-12);
        assert!((r.inverse_norm_max - 1.0).abs() < 1e-12);
        assert!((r.sigma_hi_hat - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_diffusion_is_singular() {
        let m = ControlledDiffusion::builder("sing", 2, 1)
            .diffusion(|_, _, _, s| {
                s.fill(0.0);
                s[0] = 1.0;
            })
            .build()
            .unwrap();
        let r = check_ellipticity(&m, &SampleRegion::cube(2, 1, 1.0), 10, 7).unwrap();
        assert!(!r.holds);
        assert!(r.singular_witness.is_some());
    }

    #[test]
    fn ou_growth_constants() {
        let m = drift_model(|x| -x);
        let r = check_growth_lipschitz(&m, 5.0, 1.0, (&[0.0], &[0.0]), 2000, 8).unwrap();
        assert!((r.k_hat - 1.0).abs() < 1e-6, "{}", r.k_hat);
        assert_eq!(r.omega_hat, 0.0);
    }

    #[test]
    fn sine_drift_lipschitz() {
        let m = drift_model(|x| -x + 0.5 * x.sin());
        let r = check_growth_lipschitz(&m, 5.0, 1.0, (&[0.0], &[0.0]), 20_000, 9).unwrap();
        assert!((r.k_hat - 1.5).abs() < 0.01, "{}", r.k_hat);
    }

    #[test]
    fn cubic_drift_local_lipschitz() {
        // max |3x²| on [-2, 2] is 12.
        let m = drift_model(|x| -x * x * x);
        let r = check_growth_lipschitz(&m, 2.0, 1.0, (&[0.0], &[0.0]), 20_000, 10).unwrap();
        assert!((r.k_hat - 12.0).abs() < 0.6, "{}", r.k_hat);
        assert!(r.k_hat <= 12.0 + 1e-9);
    }

    #[test]
    fn finite_differences_of_simple_coefficients() {
        let m = ControlledDiffusion::builder("fd", 1, 1)
            .drift_1d(|_, x, _| -2.0 * x)
            .diffusion_1d(|_, x, _| 1.0 + 0.1 * x.tanh())
            .cost_1d(|_, x, u| x * x + u * u)
            .build()
            .unwrap();
        let g = finite_difference_gradients(&m, 0.0, &[1.0], &[1.0], Some(1e-4)).unwrap();
        assert!((g.drift_x[0] + 2.0).abs() < 1e-6);
        assert!((g.cost_x[0] - 2.0).abs() < 1e-6);
        assert!((g.cost_u[0] - 2.0).abs() < 1e-6);
        let g0 = finite_difference_gradients(&m, 0.0, &[0.0], &[0.0], None).unwrap();
        assert!((g0.diffusion_x[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_requires_permission() {
        let m = drift_model(|x| -x);
        let mut out = [0.0];
        let err = m
            .drift_jacobian_x(0.0, &[0.0], &[0.0], GradientPolicy::AnalyticOnly, &mut out)
            .unwrap_err();
        assert!(matches!(err, Error::MissingGradient(_)));
        m.drift_jacobian_x(0.0, &[0.3], &[0.0], GradientPolicy::AllowFiniteDifference, &mut out)
            .unwrap();
        assert!((out[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn report_is_deterministic() {
        let m = drift_model(|x| -x + 0.5 * x.sin());
        let region = SampleRegion::cube(1, 1, 3.0);
        let a = check_assumptions(&m, &region, 500, 11).unwrap();
        let b = check_assumptions(&m, &region, 500, 11).unwrap();
        assert_eq!(a, b);
    }
}
