//! Registered scenarios and their oracles.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::oracle::{bounded_cost_gradient_sup, lq_feedback_cost, ou_oracle, ou_tv, riccati_oracle, RiccatiSolution};
use crate::control::ControlLaw;
use crate::error::{Error, Result};
use crate::model::{ControlledDiffusion, DeclaredConstants};

pub const SCENARIOS: [&str; 5] = ["ou-quadratic", "lq-1d", "bounded-cost-1d", "periodic-1d", "nondissipative-1d"];

/// Scalar model parameters; unset fields take the scenario defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Linear drift coefficient `a` in `b = ax + u`.
    pub a: Option<f64>,
    pub sigma: Option<f64>,
    pub q: Option<f64>,
    pub r: Option<f64>,
    pub period: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub sigma: f64,
}

/// Closed-form targets available for a scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub lq: Option<LqParams>,
    pub riccati: Option<RiccatiSolution>,
    /// OU rate and noise of the closed loop under the default law.
    pub ou: Option<(f64, f64)>,
    /// OU rate and noise under the zero control.
    pub uncontrolled_ou: Option<(f64, f64)>,
    /// Ergodic cost of the default law.
    pub lambda: Option<f64>,
    /// Adjoint slope `2P` of the optimal feedback.
    pub adjoint_slope: Option<f64>,
    /// `sup ‖∇ₓL‖`.
    pub cost_gradient_sup: Option<f64>,
}

impl Oracle {
    /// λ of the feedback `u = −Kx`, where the scenario is LQ.
    pub fn lambda_of_gain(&self, gain: f64) -> Option<f64> {
        let p = self.lq?;
        lq_feedback_cost(p.a, p.q, p.r, p.sigma, gain).ok()
    }
}

pub struct Scenario {
    pub name: String,
    pub model: ControlledDiffusion,
    pub x0: Vec<f64>,
    /// Gain `K` of the default law `u = −Kx`.
    pub default_gain: f64,
    /// Whether the control enters the dynamics or cost at all.
    pub controlled: bool,
    pub oracle: Oracle,
}

impl Scenario {
    pub fn law(&self, gain: f64) -> ControlLaw {
        let law = ControlLaw::linear_feedback_1d(gain);
        match self.model.period {
            Some(p) => law.with_period(p),
            None => law,
        }
    }

    /// Declared dissipativity rate.
    pub fn k(&self) -> Result<f64> {
        self.model.constants.k.ok_or(Error::MissingConstant("dissipativity rate k"))
    }
}

fn linear_constants(a: f64, sigma: f64, grad_cost_bound: Option<f64>) -> DeclaredConstants {
    DeclaredConstants {
        k: (a < 0.0).then_some(-a),
        sigma_lo: Some(sigma.abs()),
        sigma_hi: Some(sigma.abs() + 1.0 / sigma.abs()),
        sigma_lipschitz: Some(0.0),
        grad_cost_bound,
        drift_at_zero_bound: None,
    }
}

fn lq_model(name: &str, a: f64, sigma: f64, q: f64, r: f64) -> Result<ControlledDiffusion> {
    ControlledDiffusion::builder(name, 1, 1)
        .drift_1d(move |_, x, u| a * x + u)
        .diffusion_1d(move |_, _, _| sigma)
        .cost_1d(move |_, x, u| q * x * x + r * u * u)
        .drift_x_1d(move |_, _, _| a)
        .diffusion_x_1d(|_, _, _| 0.0)
        .cost_x_1d(move |_, x, _| 2.0 * q * x)
        .drift_u_1d(|_, _, _| 1.0)
        .diffusion_u_1d(|_, _, _| 0.0)
        .cost_u_1d(move |_, _, u| 2.0 * r * u)
        .constants(linear_constants(a, sigma, None))
        .build()
}

/// Look up a scenario and cross-validate its oracles.
pub fn load_scenario(name: &str, params: &ModelParams) -> Result<Scenario> {
    let sigma = params.sigma.unwrap_or(1.0);
    let q = params.q.unwrap_or(1.0);
    let r = params.r.unwrap_or(1.0);
    if !(sigma > 0.0) || q < 0.0 || !(r > 0.0) {
        return Err(Error::Config("model parameters need sigma > 0, q >= 0, r > 0".into()));
    }
    let sc = match name {
        "ou-quadratic" => {
            let a = params.a.unwrap_or(-1.0);
            if !(a < 0.0) {
                return Err(Error::Config("ou-quadratic needs a < 0".into()));
            }
            let model = ControlledDiffusion::builder(name, 1, 1)
                .drift_1d(move |_, x, _| a * x)
                .diffusion_1d(move |_, _, _| sigma)
                .cost_1d(move |_, x, _| q * x * x)
                .drift_x_1d(move |_, _, _| a)
                .diffusion_x_1d(|_, _, _| 0.0)
                .cost_x_1d(move |_, x, _| 2.0 * q * x)
                .drift_u_1d(|_, _, _| 0.0)
                .diffusion_u_1d(|_, _, _| 0.0)
                .cost_u_1d(|_, _, _| 0.0)
                .constants(DeclaredConstants { drift_at_zero_bound: Some(0.0), ..linear_constants(a, sigma, None) })
                .build()?;
            let ou = ou_oracle(-a, sigma, 0.0, 0.0)?;
            Scenario {
                name: name.into(),
                model,
                x0: vec![0.0],
                default_gain: 0.0,
                controlled: false,
                oracle: Oracle {
                    ou: Some((-a, sigma)),
                    uncontrolled_ou: Some((-a, sigma)),
                    lambda: Some(q * ou.stationary_variance),
                    ..Oracle::default()
                },
            }
        }
        "lq-1d" | "nondissipative-1d" => {
            let a = params.a.unwrap_or(if name == "lq-1d" { -1.0 } else { 1.0 });
            let model = lq_model(name, a, sigma, q, r)?;
            let lq = LqParams { a, q, r, sigma };
            let ric = riccati_oracle(a, q, r, sigma)?;
            let gain = ric.k_star;
            Scenario {
                name: name.into(),
                model,
                x0: vec![0.0],
                default_gain: gain,
                controlled: true,
                oracle: Oracle {
                    lq: Some(lq),
                    riccati: Some(ric),
                    ou: Some((gain - a, sigma)),
                    uncontrolled_ou: (a < 0.0).then_some((-a, sigma)),
                    lambda: Some(lq_feedback_cost(a, q, r, sigma, gain)?),
                    adjoint_slope: Some(2.0 * ric.p),
                    ..Oracle::default()
                },
            }
        }
        "bounded-cost-1d" => {
            let c = bounded_cost_gradient_sup();
            let model = ControlledDiffusion::builder(name, 1, 1)
                .drift_1d(|_, x, u| -x + u.tanh())
                .diffusion_1d(|_, x, _| 1.0 + 0.1 * x.tanh())
                .cost_1d(|_, x, u| 1.0 - (-x * x).exp() + u * u)
                .drift_x_1d(|_, _, _| -1.0)
                .diffusion_x_1d(|_, x, _| 0.1 / x.cosh().powi(2))
                .cost_x_1d(|_, x, _| 2.0 * x * (-x * x).exp())
                .drift_u_1d(|_, _, u| 1.0 / u.cosh().powi(2))
                .diffusion_u_1d(|_, _, _| 0.0)
                .cost_u_1d(|_, _, u| 2.0 * u)
                .constants(DeclaredConstants {
                    k: Some(1.0),
                    sigma_lo: Some(0.9),
                    sigma_hi: Some(1.1 + 1.0 / 0.9),
                    sigma_lipschitz: Some(0.1),
                    grad_cost_bound: Some(c),
                    drift_at_zero_bound: Some(1.0),
                })
                .build()?;
            Scenario {
                name: name.into(),
                model,
                x0: vec![0.0],
                default_gain: 0.0,
                controlled: true,
                oracle: Oracle { cost_gradient_sup: Some(c), ..Oracle::default() },
            }
        }
        "periodic-1d" => {
            let a = params.a.unwrap_or(-1.0);
            let period = params.period.unwrap_or(2.0);
            if !(a < 0.0) || !(period > 0.0) {
                return Err(Error::Config("periodic-1d needs a < 0 and period > 0".into()));
            }
            let w = TAU / period;
            let model = ControlledDiffusion::builder(name, 1, 1)
                .drift_1d(move |_, x, u| a * x + u)
                .diffusion_1d(move |_, _, _| sigma)
                .cost_1d(move |t, x, u| q * (x - (w * t).sin()).powi(2) + r * u * u)
                .drift_x_1d(move |_, _, _| a)
                .diffusion_x_1d(|_, _, _| 0.0)
                .cost_x_1d(move |t, x, _| 2.0 * q * (x - (w * t).sin()))
                .drift_u_1d(|_, _, _| 1.0)
                .diffusion_u_1d(|_, _, _| 0.0)
                .cost_u_1d(move |_, _, u| 2.0 * r * u)
                .constants(linear_constants(a, sigma, None))
                .period(period)
                .build()?;
            // Uncontrolled: X is a centred OU, so E(X − sin ωt)² averages to
            // σ²/(2k) + 1/2 over a period.
            let ou = ou_oracle(-a, sigma, 0.0, 0.0)?;
            Scenario {
                name: name.into(),
                model,
                x0: vec![0.0],
                default_gain: 0.0,
                controlled: true,
                oracle: Oracle {
                    ou: Some((-a, sigma)),
                    uncontrolled_ou: Some((-a, sigma)),
                    lambda: Some(q * (ou.stationary_variance + 0.5)),
                    ..Oracle::default()
                },
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown scenario '{other}'; registered: {}",
                SCENARIOS.join(", ")
            )))
        }
    };
    cross_validate(&sc)?;
    Ok(sc)
}

/// Oracles must agree with each other before any stage runs.
fn cross_validate(sc: &Scenario) -> Result<()> {
    let fail = |what: &str| Err(Error::Config(format!("oracle cross-validation failed for {}: {what}", sc.name)));
    if let (Some(lq), Some(ric)) = (sc.oracle.lq, sc.oracle.riccati) {
        let l = lq_feedback_cost(lq.a, lq.q, lq.r, lq.sigma, ric.k_star)?;
        if (l - ric.lambda_star).abs() > 1e-12 * (1.0 + l) {
            return fail("feedback cost at K* differs from σ²P");
        }
    }
    if let (Some((k, s)), Some(lq)) = (sc.oracle.ou, sc.oracle.lq) {
        // Stationary second moment of the closed loop times q + rK².
        let g = sc.default_gain;
        let v = ou_oracle(k, s, 0.0, 0.0)?.stationary_variance;
        if ((lq.q + lq.r * g * g) * v - sc.oracle.lambda.unwrap_or(f64::NAN)).abs() > 1e-12 {
            return fail("closed-loop OU moment differs from the feedback cost");
        }
    }
    if let Some((k, s)) = sc.oracle.ou {
        let far = ou_oracle(k, s, 1.0, 60.0 / k)?;
        if (far.variance - far.stationary_variance).abs() > 1e-12 || ou_tv(k, s, 1.0, -1.0, 60.0 / k)? > 1e-12 {
            return fail("OU law does not relax to its stationary limit");
        }
    }
    if let Some(c) = sc.oracle.cost_gradient_sup {
        let mut grad = [0.0];
        let probe = (0..=2000).map(|i| -4.0 + i as f64 * 0.004).fold(0.0f64, |m, x| {
            sc.model.cost_gradient_x(0.0, &[x], &[0.0], crate::model::GradientPolicy::AnalyticOnly, &mut grad).ok();
            m.max(grad[0].abs())
        });
        if probe > c * (1.0 + 1e-9) || probe < 0.999 * c {
            return fail("cost-gradient supremum does not match the sampled gradient");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_loads() {
        for name in SCENARIOS {
            let s = load_scenario(name, &ModelParams::default()).unwrap();
            assert_eq!(s.name, name);
        }
        assert!(matches!(load_scenario("nope", &ModelParams::default()), Err(Error::Config(_))));
    }

    #[test]
    fn lq_oracle_values() {
        let s = load_scenario("lq-1d", &ModelParams::default()).unwrap();
        let r = s.oracle.riccati.unwrap();
        assert!((r.k_star - 0.41421356237309503).abs() < 1e-15);
        assert!((s.oracle.lambda_of_gain(1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((s.oracle.lambda_of_gain(0.2).unwrap() - 1.04 / 2.4).abs() < 1e-15);
        let o = load_scenario("ou-quadratic", &ModelParams::default()).unwrap();
        assert_eq!(o.oracle.lambda, Some(0.5));
        let p = load_scenario("periodic-1d", &ModelParams::default()).unwrap();
        assert_eq!(p.oracle.lambda, Some(1.0));
        assert!(load_scenario("nondissipative-1d", &ModelParams::default()).unwrap().model.constants.k.is_none());
    }
}
