//! Sufficient stochastic maximum principle: Hamiltonian minimality along
//! the candidate's paths, transversality against challengers, and direct
//! comparison of ergodic costs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::BsdeSolution;
use crate::control::ControlLaw;
use crate::error::{Error, Result};
use crate::hamiltonian::{eval_h, minimize_h_u, ConvexityReport};
use crate::linalg;
use crate::model::{ControlledDiffusion, GradientPolicy};
use crate::rng::stream_rng;
use crate::simulate::{long_run_average, terminal_states, InitialLaw, LongRunEstimate, PathEnsemble, TimeGrid};
use crate::stats::{Estimate, Z95};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapWitness {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub u_min: Vec<f64>,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalityReport {
    pub n_samples: usize,
    pub sup_gap: f64,
    pub mean_gap: f64,
    /// Mean `|H|` along the samples; tolerances are relative to it.
    pub h_scale: f64,
    /// Mean standard error of `H` induced by the regression error of `(Y, Z)`.
    pub h_std_err: f64,
    /// Relative tolerance in use.
    pub tol: f64,
    pub witness: Option<GapWitness>,
    pub passed: bool,
}

/// `H(u_t) − min_u H` at sampled `(t, path)` pairs of the candidate's own
/// ensemble, with `(Y, Z)` from `solution`. Passes iff
/// `sup gap ≤ tol·mean|H|`; by default `tol` is three standard errors of `H`
/// relative to the same scale, so the verdict is invariant under scaling of
/// the cost.
#[allow(clippy::too_many_arguments)]
pub fn verify_hamiltonian_minimality(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    solution: &BsdeSolution,
    ensemble: &PathEnsemble,
    tol: Option<f64>,
    n_samples: usize,
    seed: u64,
    policy: GradientPolicy,
) -> Result<MinimalityReport> {
    let n = model.state_dim();
    if solution.state_dim != n || solution.y_dim != n || ensemble.state_dim != n {
        return Err(Error::Dimension("adjoint solution and ensemble must match the model".into()));
    }
    let t_max = solution.grid.t_end.min(ensemble.grid.t_end);
    let t_min = solution.grid.t_start.max(ensemble.grid.t_start);
    if !(t_max > t_min) || n_samples == 0 {
        return Err(Error::InvalidArgument("solution and ensemble share no time window".into()));
    }
    let mut rng = stream_rng(seed);
    let picks: Vec<(usize, usize)> = (0..n_samples)
        .map(|_| {
            let i = ensemble.grid.index_of(rng.gen_range(t_min..t_max));
            (i.min(ensemble.grid.n_steps - 1), rng.gen_range(0..ensemble.n_paths))
        })
        .collect();
    let bounds = law.bounds();
    let results: Vec<Result<(f64, f64, f64, GapWitness)>> = picks
        .par_iter()
        .map(|&(i, p)| {
            let t = ensemble.grid.time(i);
            let x = ensemble.state(p, i);
            let u = ensemble.control(p, i);
            let y = solution.evaluate_y(t, x)?;
            let z = solution.evaluate_z(t, x)?;
            let h = eval_h(model, t, x, u, &y, &z)?;
            let min = minimize_h_u(model, t, x, &y, &z, u, bounds, policy)?;
            let b = model.drift(t, x, u)?;
            let s = model.diffusion(t, x, u)?;
            let se_y: f64 = (0..n).map(|o| solution.y_standard_error(t, x, o)).collect::<Result<Vec<_>>>()?.iter().map(|v| v * v).sum::<f64>().sqrt();
            let si = solution.grid.index_of(t).min(solution.z_slices.len() - 1);
            let zfit = &solution.z_slices[si];
            let se_z: f64 = (0..n * n)
                .map(|o| {
                    let exps = solution.basis.exponents(n);
                    zfit.prediction_se(&solution.basis, &exps, solution.grid.time(si), x, o).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            let se_h = linalg::norm(&b) * se_y + linalg::norm(&s) * se_z;
            let gap = (h - min.h).max(0.0);
            Ok((gap, h.abs(), se_h, GapWitness { t, x: x.to_vec(), u: u.to_vec(), u_min: min.u, gap }))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let ns = results.len() as f64;
    let h_scale = results.iter().map(|r| r.1).sum::<f64>() / ns;
    let h_std_err = results.iter().map(|r| r.2).sum::<f64>() / ns;
    let mean_gap = results.iter().map(|r| r.0).sum::<f64>() / ns;
    let worst = results.into_iter().max_by(|a, b| a.0.total_cmp(&b.0)).expect("samples");
    let scale = h_scale.max(f64::MIN_POSITIVE);
    let tol = tol.unwrap_or(3.0 * h_std_err / scale);
    let sup_gap = worst.0;
    Ok(MinimalityReport {
        n_samples,
        sup_gap,
        mean_gap,
        h_scale,
        h_std_err,
        tol,
        passed: sup_gap <= tol * h_scale,
        witness: (sup_gap > 0.0).then_some(worst.3),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransversalityPoint {
    pub horizon: f64,
    /// `(1/T)·E[⟨Ȳ_T, X^u_T − X̄_T⟩]`
    pub value: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransversalityCurve {
    pub challenger: String,
    pub points: Vec<TransversalityPoint>,
    /// Slope of `log(|value| + ci95)` against `log T`; `None` when the curve
    /// vanishes identically or diverges.
    pub exponent: Option<f64>,
    pub r_squared: Option<f64>,
    pub identically_zero: bool,
    pub divergent: bool,
    /// `|curve| = O(1/T)` or faster (exponent ≤ −0.8), or identically zero.
    pub decaying: bool,
}

/// Transversality curves `(1/T)·E[⟨Ȳ(X̄_T), X^u_T − X̄_T⟩]` for each
/// challenger under common noise from `x0`. `Ȳ` is the stationary map
/// `Y(0,·)` of an infinite-horizon solution; horizons beyond twice the solved
/// horizon are refused.
#[allow(clippy::too_many_arguments)]
pub fn verify_transversality(
    model: &ControlledDiffusion,
    candidate: &ControlLaw,
    challengers: &[ControlLaw],
    solution: &BsdeSolution,
    horizons: &[f64],
    x0: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<TransversalityCurve>> {
    let solved = solution.diagnostics.horizon.max(solution.grid.t_end);
    if let Some(h) = horizons.iter().find(|h| **h > 2.0 * solved) {
        return Err(Error::HorizonOutOfRange { requested: *h, max: 2.0 * solved });
    }
    if horizons.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidArgument("horizons must be positive".into()));
    }
    let n = model.state_dim();
    let initial = InitialLaw::Point(x0.to_vec());
    let mut bar = Vec::with_capacity(horizons.len());
    for h in horizons {
        let grid = TimeGrid::with_step(*h, dt)?;
        let xs = terminal_states(model, candidate, &grid, &initial, n_paths, seed)?;
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| solution.evaluate_y(0.0, x)).collect::<Result<_>>()?;
        bar.push((grid, xs, ys));
    }
    challengers
        .iter()
        .map(|law| {
            let mut points = Vec::with_capacity(horizons.len());
            let mut divergent = false;
            for (grid, xs_bar, ys) in &bar {
                let horizon = grid.t_end;
                let xs = match terminal_states(model, law, grid, &initial, n_paths, seed) {
                    Ok(v) => v,
                    Err(Error::BlowUp { .. }) => {
                        divergent = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                let v: Vec<f64> = (0..n_paths)
                    .map(|p| (0..n).map(|j| ys[p][j] * (xs[p][j] - xs_bar[p][j])).sum::<f64>() / horizon)
                    .collect();
                let e = Estimate::from_samples(&v);
                if !e.mean.is_finite() {
                    divergent = true;
                    break;
                }
                points.push(TransversalityPoint { horizon, value: e.mean, ci95: e.ci95() });
            }
            let identically_zero = !divergent && points.iter().all(|p| p.value == 0.0 && p.ci95 == 0.0);
            let (exponent, r_squared) = if divergent || identically_zero || points.len() < 2 {
                (None, None)
            } else {
                let ls: Vec<f64> = points.iter().map(|p| p.horizon.ln()).collect();
                let vs: Vec<f64> = points.iter().map(|p| (p.value.abs() + p.ci95).ln()).collect();
                let (_, s, r2) = linalg::linear_fit(&ls, &vs);
                (Some(s), Some(r2))
            };
            let decaying = identically_zero || exponent.is_some_and(|s| s <= -0.8);
            Ok(TransversalityCurve {
                challenger: law.label.clone(),
                points,
                exponent,
                r_squared,
                identically_zero,
                divergent,
                decaying,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub law: String,
    pub lambda_hat: f64,
    pub ci95: f64,
    /// `λ̂(law) − λ̂(candidate)` from paired per-path averages.
    pub gap: f64,
    pub gap_ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub candidate: CostRow,
    pub challengers: Vec<CostRow>,
    pub horizon: f64,
    pub burn_in: f64,
    pub n_paths: usize,
}

impl CostTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("law,lambda_hat,ci95,gap,gap_ci95\n");
        for r in std::iter::once(&self.candidate).chain(&self.challengers) {
            s.push_str(&format!("{},{},{},{},{}\n", r.law, r.lambda_hat, r.ci95, r.gap, r.gap_ci95));
        }
        s
    }

    /// Law with the smallest estimated cost.
    pub fn argmin(&self) -> &CostRow {
        std::iter::once(&self.candidate)
            .chain(&self.challengers)
            .min_by(|a, b| a.lambda_hat.total_cmp(&b.lambda_hat))
            .expect("candidate row")
    }
}

/// Long-run costs of the candidate and each challenger on common noise,
/// with paired gaps.
#[allow(clippy::too_many_arguments)]
pub fn compare_costs(
    model: &ControlledDiffusion,
    candidate: &ControlLaw,
    challengers: &[ControlLaw],
    initial: &InitialLaw,
    horizon: f64,
    burn_in: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<CostTable> {
    let run = |law: &ControlLaw| long_run_average(model, law, initial, horizon, burn_in, dt, n_paths, seed);
    let base = run(candidate)?;
    let row = |law: &ControlLaw, e: &LongRunEstimate| {
        let d: Vec<f64> = e.per_path.iter().zip(&base.per_path).map(|(a, b)| a - b).collect();
        let g = Estimate::from_samples(&d);
        CostRow { law: law.label.clone(), lambda_hat: e.lambda_hat, ci95: e.ci95, gap: g.mean, gap_ci95: Z95 * g.std_err }
    };
    let challengers = challengers
        .iter()
        .map(|law| Ok(row(law, &run(law)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CostTable { candidate: row(candidate, &base), challengers, horizon, burn_in, n_paths })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Certified,
    Violated { witness: String },
    Inconclusive { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpCertificate {
    pub hamiltonian_gap: f64,
    pub minimality: MinimalityReport,
    pub convexity_holds: bool,
    pub transversality_curves: Vec<TransversalityCurve>,
    pub costs: CostTable,
    pub verdict: Verdict,
}

/// Certified iff convexity, minimality, decaying transversality and no
/// challenger below the candidate beyond its CI; violated iff minimality
/// fails or a challenger wins by more than three CIs; inconclusive
/// otherwise, and always when convexity fails.
pub fn issue_certificate(
    convexity: &ConvexityReport,
    minimality: MinimalityReport,
    transversality: Vec<TransversalityCurve>,
    costs: CostTable,
) -> SmpCertificate {
    let decisive = costs.challengers.iter().find(|r| r.gap < -3.0 * r.gap_ci95);
    let wins = costs.challengers.iter().any(|r| r.gap < -r.gap_ci95);
    let verdict = if !convexity.holds {
        Verdict::Inconclusive { reason: "convexity of H in (x, u) fails on the probe region".into() }
    } else if !minimality.passed {
        let w = minimality.witness.as_ref();
        Verdict::Violated {
            witness: match w {
                Some(w) => format!(
                    "Hamiltonian gap {:.4e} at t={:.3}, x={:?}: u={:?}, argmin {:?}",
                    w.gap, w.t, w.x, w.u, w.u_min
                ),
                None => "Hamiltonian gap above tolerance".into(),
            },
        }
    } else if let Some(r) = decisive {
        Verdict::Violated { witness: format!("challenger {} lowers the cost by {:.4e} ± {:.1e}", r.law, -r.gap, r.gap_ci95) }
    } else if transversality.iter().any(|c| !c.decaying) {
        Verdict::Inconclusive { reason: "a transversality curve does not decay".into() }
    } else if wins {
        Verdict::Inconclusive { reason: "a challenger is cheaper within three CIs".into() }
    } else {
        Verdict::Certified
    };
    SmpCertificate {
        hamiltonian_gap: minimality.sup_gap,
        minimality,
        convexity_holds: convexity.holds,
        transversality_curves: transversality,
        costs,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{solve_ih_adjoint, IhParams};
    use crate::simulate::simulate_forward;

    fn lq() -> ControlledDiffusion {
        ControlledDiffusion::builder("lq", 1, 1)
            .drift_1d(|_, x, u| -x + u)
            .diffusion_1d(|_, _, _| 1.0)
            .cost_1d(|_, x, u| x * x + u * u)
            .drift_x_1d(|_, _, _| -1.0)
            .diffusion_x_1d(|_, _, _| 0.0)
            .cost_x_1d(|_, x, _| 2.0 * x)
            .drift_u_1d(|_, _, _| 1.0)
            .diffusion_u_1d(|_, _, _| 0.0)
            .cost_u_1d(|_, _, u| 2.0 * u)
            .build()
            .unwrap()
    }

    #[test]
    fn paired_self_comparison_is_exactly_zero() {
        let law = ControlLaw::linear_feedback_1d(0.5);
        for seed in [1, 2, 3] {
            let t = compare_costs(&lq(), &law, std::slice::from_ref(&law), &InitialLaw::Point(vec![0.0]), 5.0, 1.0, 0.02, 50, seed).unwrap();
            assert_eq!(t.challengers[0].gap, 0.0);
            assert_eq!(t.challengers[0].gap_ci95, 0.0);
        }
    }

    #[test]
    fn control_free_hamiltonian_has_zero_gap() {
        let m = ControlledDiffusion::builder("ou", 1, 1)
            .drift_1d(|_, x, _| -x)
            .diffusion_1d(|_, _, _| 1.0)
            .cost_1d(|_, x, _| x * x)
            .build()
            .unwrap();
        let law = ControlLaw::linear_feedback_1d(0.7);
        let mut p = IhParams::new(1.0, vec![0.0], 3);
        p.n_paths = 1000;
        p.tol = 0.2;
        p.policy = GradientPolicy::AllowFiniteDifference;
        let sol = solve_ih_adjoint(&m, &law, &p).unwrap();
        let g = TimeGrid::with_step(1.0, 0.02).unwrap();
        let ens = simulate_forward(&m, &law, &g, 200, &[0.5], 4).unwrap();
        let r = verify_hamiltonian_minimality(&m, &law, &sol, &ens, None, 50, 5, GradientPolicy::AllowFiniteDifference).unwrap();
        assert!(r.sup_gap < 1e-9, "{r:?}");
        assert!(r.passed);
    }

    #[test]
    fn identical_challenger_gives_zero_transversality() {
        let law = ControlLaw::linear_feedback_1d(2f64.sqrt() - 1.0);
        let mut p = IhParams::new(1.0, vec![0.0], 3);
        p.n_paths = 1000;
        p.tol = 0.2;
        let sol = solve_ih_adjoint(&lq(), &law, &p).unwrap();
        let c = verify_transversality(&lq(), &law, std::slice::from_ref(&law), &sol, &[1.0, 2.0], &[0.5], 0.02, 100, 7).unwrap();
        assert!(c[0].identically_zero && c[0].decaying);
        let far = verify_transversality(&lq(), &law, std::slice::from_ref(&law), &sol, &[1e3], &[0.5], 0.02, 10, 7);
        assert!(matches!(far, Err(Error::HorizonOutOfRange { .. })));
    }

    fn report(holds: bool) -> ConvexityReport {
        ConvexityReport { holds, n_samples: 1, seed: 0, tolerance: 0.0, worst_violation: 0.0, witness: None }
    }

    fn min_report(passed: bool) -> MinimalityReport {
        MinimalityReport { n_samples: 1, sup_gap: 0.0, mean_gap: 0.0, h_scale: 1.0, h_std_err: 0.0, tol: 0.1, witness: None, passed }
    }

    fn costs(gaps: &[f64]) -> CostTable {
        let row = |g: f64| CostRow { law: format!("{g}"), lambda_hat: 1.0 + g, ci95: 0.01, gap: g, gap_ci95: 0.01 };
        CostTable { candidate: row(0.0), challengers: gaps.iter().map(|g| row(*g)).collect(), horizon: 1.0, burn_in: 0.0, n_paths: 1 }
    }

    #[test]
    fn certificate_rules() {
        assert_eq!(issue_certificate(&report(true), min_report(true), vec![], costs(&[0.1])).verdict, Verdict::Certified);
        assert!(matches!(issue_certificate(&report(true), min_report(false), vec![], costs(&[0.1])).verdict, Verdict::Violated { .. }));
        assert!(matches!(issue_certificate(&report(false), min_report(false), vec![], costs(&[-1.0])).verdict, Verdict::Inconclusive { .. }));
        assert!(matches!(issue_certificate(&report(true), min_report(true), vec![], costs(&[-0.02])).verdict, Verdict::Inconclusive { .. }));
        // Adding a decisive challenger turns a certificate into a violation.
        assert!(matches!(issue_certificate(&report(true), min_report(true), vec![], costs(&[0.1, -0.5])).verdict, Verdict::Violated { .. }));
    }
}
