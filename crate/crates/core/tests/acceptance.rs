//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ergolab::adjoint::{solve_ih_adjoint, test_points, verify_bound, IhParams};
use ergolab::ebsde::{check_lambda_consistency, solve_ebsde, ConsistencyParams, DiscountParams};
use ergolab::ergodicity::{
    check_gradient, coupling_tv, fit_prefactor, irreducibility_probe, test_functions, CouplingParams, FellerConstants, HitVerdict,
};
use ergolab::hamiltonian::convexity_probe;
use ergolab::model::{check_dissipativity, GradientPolicy, SampleRegion};
use ergolab::runner::oracle::{bounded_cost_gradient_sup, ou_oracle, ou_tv, riccati_oracle};
use ergolab::runner::scenario::{load_scenario, ModelParams, Scenario};
use ergolab::simulate::{second_moment_curve, simulate_forward, InitialLaw, TimeGrid};
use ergolab::smp::{compare_costs, issue_certificate, verify_hamiltonian_minimality, verify_transversality, Verdict};
use ergolab::stats::normal_cdf;
use ergolab::ControlLaw;

fn scenario(name: &str) -> Scenario {
    load_scenario(name, &ModelParams::default()).unwrap()
}

fn verdict(n: usize, title: &str, pass: bool, detail: String) {
    println!("criterion {n:>2} {title}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn k_star() -> f64 {
    riccati_oracle(-1.0, 1.0, 1.0, 1.0).unwrap().k_star
}

fn ou_law() -> ControlLaw {
    ControlLaw::zero(1)
}

#[test]
fn c01_dissipativity_duality() {
    let start = Instant::now();
    let region = SampleRegion::new(vec![-4.0], vec![4.0], 1).with_controls(vec![-2.0], vec![2.0]);
    let mut detail = Vec::new();
    let mut pass = true;
    for name in ["ou-quadratic", "lq-1d", "bounded-cost-1d"] {
        let r = check_dissipativity(&scenario(name).model, &region, 4000, 1).unwrap();
        pass &= r.holds && r.relative_gap <= 0.10;
        detail.push(format!("{name} {:.4}/{:.4}", r.k_pairwise, r.k_gradient));
    }
    let r = check_dissipativity(&scenario("nondissipative-1d").model, &region, 4000, 1).unwrap();
    pass &= !r.holds && r.k_pairwise <= 0.0 && r.k_gradient <= 0.0;
    detail.push(format!("nondissipative {:.4}/{:.4}", r.k_pairwise, r.k_gradient));
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    verdict(1, "dissipativity duality", pass, format!("{}; {elapsed:.1?}", detail.join(", ")));
}

#[test]
fn c02_moment_bound() {
    let sc = scenario("ou-quadratic");
    let grid = TimeGrid::with_step(5.0, 1e-3).unwrap();
    let curve = second_moment_curve(&sc.model, &ou_law(), &grid, &[3.0], 100_000, 2, 500).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for t in [0.5f64, 1.0, 2.0, 5.0] {
        let exact = 9.0 * (-2.0 * t).exp() + 0.5 * (1.0 - (-2.0 * t).exp());
        let m = curve.at(t).mean;
        let rel = (m / exact - 1.0).abs();
        pass &= rel <= 0.03;
        detail.push(format!("t={t}: {m:.4} vs {exact:.4}"));
    }
    verdict(2, "moment bound", pass, detail.join(", "));
}

#[test]
fn c03_infinite_horizon_adjoint() {
    let start = Instant::now();
    let sc = scenario("lq-1d");
    let law = sc.law(k_star());
    let sol = solve_ih_adjoint(&sc.model, &law, &IhParams::new(1.0, vec![0.0], 3)).unwrap();
    let d = &sol.diagnostics;
    let slope = d.decay_slope.unwrap();
    let ratio = slope / -2.0;
    let p = riccati_oracle(-1.0, 1.0, 1.0, 1.0).unwrap().p;
    let pts = test_points(&InitialLaw::Gaussian { mean: vec![0.0], sd: 1.0 }, 200, 4);
    let xs: Vec<f64> = pts.iter().map(|x| x[0]).collect();
    let ys: Vec<f64> = pts.iter().map(|x| sol.y_at_slice(0, x)[0]).collect();
    let y_slope = ergolab::linalg::linear_fit(&xs, &ys).1;
    let z_mean = pts.iter().map(|x| sol.z_at_slice(0, x)[0]).sum::<f64>() / pts.len() as f64;
    let elapsed = start.elapsed();
    let pass = d.strictly_decreasing == Some(true)
        && slope < 0.0
        && (0.1..=10.0).contains(&ratio)
        && (y_slope / (2.0 * p) - 1.0).abs() <= 0.05
        && (z_mean / (2.0 * p) - 1.0).abs() <= 0.10
        && elapsed < Duration::from_secs(180);
    verdict(
        3,
        "infinite-horizon adjoint",
        pass,
        format!("gap slope {slope:.3} vs -2, Y slope {y_slope:.5}, Z mean {z_mean:.5}, target {:.6}; {elapsed:.1?}", 2.0 * p),
    );
}

#[test]
fn c04_adjoint_boundedness() {
    let sc = scenario("bounded-cost-1d");
    let law = sc.law(0.0);
    let mut p = IhParams::new(1.0, vec![0.0], 5);
    p.n_paths = 4000;
    let sol = solve_ih_adjoint(&sc.model, &law, &p).unwrap();
    let grid = TimeGrid::with_step(1.0, 0.02).unwrap();
    let ens = simulate_forward(&sc.model, &law, &grid, 2000, &[0.0], 6).unwrap();
    let c = bounded_cost_gradient_sup();
    let r = verify_bound(&sol, &ens, 1.0, Some(c)).unwrap();
    let pass = !r.skipped && r.holds && r.sup_norm <= 1.1 * c;
    verdict(4, "adjoint boundedness", pass, format!("sup |Y| {:.4} ≤ {:.4}", r.sup_norm, 1.1 * c));
}

#[test]
fn c05_uniqueness_surrogate() {
    let sc = scenario("lq-1d");
    let law = sc.law(k_star());
    let mut a = IhParams::new(1.0, vec![0.0], 21);
    a.n_paths = 4_000;
    let mut b = a.clone();
    b.seed = 22;
    b.t_init = Some(6.0);
    let sa = solve_ih_adjoint(&sc.model, &law, &a).unwrap();
    let sb = solve_ih_adjoint(&sc.model, &law, &b).unwrap();
    let pts = test_points(&a.initial, a.n_test, 23);
    let gap = pts
        .iter()
        .map(|x| (sa.y_at_slice(0, x)[0] - sb.y_at_slice(0, x)[0]).abs())
        .fold(0.0, f64::max);
    verdict(5, "uniqueness surrogate", gap <= 2.0 * a.tol, format!("sup gap {gap:.4} ≤ {}", 2.0 * a.tol));
}

#[test]
fn c06_bismut_elworthy() {
    let mut detail = Vec::new();
    let mut pass = true;
    for name in ["ou-quadratic", "bounded-cost-1d"] {
        let sc = scenario(name);
        let constants = FellerConstants::from_model(&sc.model).unwrap();
        for (i, (psi_name, psi)) in test_functions().into_iter().enumerate() {
            let g = check_gradient(
                &sc.model,
                &ou_law(),
                psi_name,
                &psi,
                1.0,
                &constants,
                1.0,
                &[0.5],
                &[1.0],
                20_000,
                0.01,
                60 + i as u64,
                GradientPolicy::AnalyticOnly,
            )
            .unwrap();
            pass &= g.agree && g.within_bound;
            detail.push(format!(
                "{name}/{psi_name} {:.4}~{:.4}≤{:.3}",
                g.bismut_elworthy.estimate.mean, g.finite_difference.estimate.mean, g.bound
            ));
        }
    }
    verdict(6, "Bismut-Elworthy gradient", pass, detail.join(", "));
}

#[test]
fn c07_irreducibility() {
    let sc = scenario("ou-quadratic");
    let o = ou_oracle(1.0, 1.0, 0.0, 1.0).unwrap();
    let sd = o.variance.sqrt();
    let r = irreducibility_probe(&sc.model, &ou_law(), &[0.0], 1.0, &[o.mean], sd, 100_000, 0.001, 7).unwrap();
    let near = (r.p_hat - 0.683).abs() <= 0.02;
    let tail = irreducibility_probe(&sc.model, &ou_law(), &[0.0], 1.0, &[6.0], 0.1, 100_000, 0.01, 8).unwrap();
    let exact_tail = normal_cdf(-5.9 / sd) - normal_cdf(-6.1 / sd);
    let tail_ok = match tail.verdict {
        HitVerdict::Undetected { upper_bound } => upper_bound >= exact_tail && tail.paths_needed.is_some(),
        HitVerdict::Detected => false,
    };
    verdict(
        7,
        "irreducibility",
        near && tail_ok,
        format!("p̂ {:.4}, tail {:?} vs exact {exact_tail:.2e}, paths needed {:?}", r.p_hat, tail.verdict, tail.paths_needed),
    );
}

#[test]
fn c08_tv_decay() {
    let start = Instant::now();
    let sc = scenario("ou-quadratic");
    let params = CouplingParams::defaults(1.0, 0.5, 1, 20_000, 9).unwrap();
    let mut fits = Vec::new();
    let mut dominated = true;
    for s in [1.0, 3.0, 5.0] {
        let f = coupling_tv(&sc.model, &ou_law(), &[s], &[-s], &params).unwrap();
        if s == 1.0 {
            for ((t, v), ci) in f.times.iter().zip(&f.tv_hat).zip(&f.ci95) {
                dominated &= v + ci >= ou_tv(1.0, 1.0, 1.0, -1.0, *t).unwrap();
            }
        }
        fits.push(f);
    }
    let pf = fit_prefactor(&fits).unwrap();
    let elapsed = start.elapsed();
    let pass = dominated && fits[0].rho_hat > 0.0 && pf.monotone && pf.r_squared > 0.8 && elapsed < Duration::from_secs(180);
    verdict(
        8,
        "exponential TV decay",
        pass,
        format!("ρ̂ {:.3}, prefactor r² {:.3}, monotone {}; {elapsed:.1?}", fits[0].rho_hat, pf.r_squared, pf.monotone),
    );
}

#[test]
fn c09_ergodic_bsde_lambda() {
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, gain, target) in [("ou-quadratic", 0.0, 0.5), ("lq-1d", k_star(), riccati_oracle(-1.0, 1.0, 1.0, 1.0).unwrap().lambda_star)] {
        let sc = scenario(name);
        let law = sc.law(gain);
        let params = DiscountParams::new(vec![0.0], 11);
        let sol = solve_ebsde(&sc.model, &law, &[0.4, 0.2, 0.1, 0.05], &[0.0], &params).unwrap();
        let cons = check_lambda_consistency(&sc.model, &law, &sol, &ConsistencyParams::new(1.0, vec![0.0], params)).unwrap();
        for e in &cons.estimates {
            pass &= (e.value / target - 1.0).abs() <= 0.05;
        }
        pass &= cons.pairwise.iter().all(|p| p.agree) && cons.x0_independence.agree;
        let vals: Vec<String> = cons.estimates.iter().map(|e| format!("{}={:.4}", e.name, e.value)).collect();
        detail.push(format!("{name} [{}] vs {target:.6}", vals.join(" ")));
    }
    verdict(9, "ergodic BSDE λ identity", pass, detail.join("; "));
}

#[test]
fn c10_smp_certification() {
    let start = Instant::now();
    let sc = scenario("lq-1d");
    let region = SampleRegion::new(vec![-4.0], vec![4.0], 1).with_controls(vec![-2.0], vec![2.0]);
    let convexity = convexity_probe(&sc.model, &region, 2000, 1).unwrap();
    let grid_k = [0.2, 0.8, 1.2];
    let challengers: Vec<ControlLaw> = grid_k.iter().map(|k| sc.law(*k)).collect();
    let oracle = |k: f64| (1.0 + k * k) / (2.0 * (1.0 + k));
    let certify = |gain: f64| {
        let law = sc.law(gain);
        let sol = solve_ih_adjoint(&sc.model, &law, &IhParams::new(1.0, vec![0.0], 11)).unwrap();
        let ens = simulate_forward(&sc.model, &law, &TimeGrid::with_step(1.0, 0.02).unwrap(), 1000, &[0.0], 12).unwrap();
        let min = verify_hamiltonian_minimality(&sc.model, &law, &sol, &ens, None, 400, 13, GradientPolicy::AnalyticOnly).unwrap();
        let horizons = [4.0, 8.0, 16.0, 2.0 * sol.diagnostics.horizon];
        let curves = verify_transversality(&sc.model, &law, &challengers, &sol, &horizons, &[0.5], 0.02, 4000, 14).unwrap();
        let costs = compare_costs(&sc.model, &law, &challengers, &InitialLaw::Point(vec![0.0]), 100.0, 10.0, 0.005, 2000, 15).unwrap();
        issue_certificate(&convexity, min, curves, costs)
    };
    let best = certify(k_star());
    let worse = certify(1.0);
    let gaps_ok = best.costs.challengers.iter().all(|r| r.gap >= 0.0);
    let decaying = best.transversality_curves.iter().all(|c| c.exponent.is_some_and(|e| e <= -0.8));
    let mut lambda_ok = true;
    let mut lambdas = Vec::new();
    for (k, r) in std::iter::once((k_star(), &best.costs.candidate)).chain(grid_k.iter().copied().zip(&best.costs.challengers)) {
        lambda_ok &= (r.lambda_hat / oracle(k) - 1.0).abs() <= 0.02;
        lambdas.push(format!("{k:.4}:{:.4}/{:.4}", r.lambda_hat, oracle(k)));
    }
    let witness = matches!(&worse.verdict, Verdict::Violated { .. }) && worse.minimality.witness.is_some() && worse.hamiltonian_gap > 0.05;
    let elapsed = start.elapsed();
    let pass = best.verdict == Verdict::Certified
        && best.minimality.passed
        && best.hamiltonian_gap <= 1e-2
        && decaying
        && gaps_ok
        && witness
        && lambda_ok
        && elapsed < Duration::from_secs(300);
    verdict(
        10,
        "SMP certification",
        pass,
        format!(
            "K* gap {:.2e} {:?}; K=1 gap {:.3}; λ̂ {}; {elapsed:.1?}",
            best.hamiltonian_gap,
            best.verdict,
            worse.hamiltonian_gap,
            lambdas.join(" ")
        ),
    );
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c11_reproducibility() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("all.toml");
    std::fs::write(
        &config,
        "scenario = \"ou-quadratic\"\nseed = 17\nstages = [\"all\"]\n\
         [simulate]\nn_paths = 1000\n\
         [adjoint]\nn_paths = 1000\ntol = 0.05\n\
         [ergodicity]\ngradient_paths = 1000\nirreducibility_paths = 5000\nirreducibility_dt = 0.01\ncoupling_pairs = 1000\n\
         [ebsde]\nn_paths = 500\nlong_run_paths = 100\n\
         [smp]\ntransversality_paths = 200\nminimality_samples = 50\ncost_paths = 100\ncost_dt = 0.02\n",
    )
    .unwrap();
    let (first, second) = (root.path().join("first"), root.path().join("second"));
    let bin = env!("CARGO_BIN_EXE_ergolab");
    let run = |args: &[&str]| Command::new(bin).args(args).env("RUST_LOG", "warn").output().unwrap();
    let a = run(&["run", config.to_str().unwrap(), "--threads", "1", "--out", first.to_str().unwrap()]);
    let manifest = first.join("manifest.json");
    let b = run(&["run", "--replay", manifest.to_str().unwrap(), "--threads", "3", "--out", second.to_str().unwrap()]);
    let (ta, tb) = (tree(&first), tree(&second));
    let pass = a.status.success() && b.status.success() && !ta.is_empty() && ta == tb;
    verdict(11, "reproducibility", pass, format!("{} files, exit codes {:?}/{:?}", ta.len(), a.status.code(), b.status.code()));
}
