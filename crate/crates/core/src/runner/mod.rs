//! Configured experiment pipelines and their result bundles.

pub mod oracle;
pub mod scenario;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_ih_adjoint, test_points, verify_bound, BsdeSolution, IhParams, RegressionBasis};
use crate::control::ControlLaw;
use crate::ebsde::{check_lambda_consistency, solve_ebsde, ConsistencyParams, DiscountParams};
use crate::ergodicity::{
    check_gradient, check_tangent_moments, coupling_tv, fit_prefactor, irreducibility_probe, test_functions, CouplingParams,
    FellerConstants, HitVerdict,
};
use crate::error::{Error, Result};
use crate::hamiltonian::convexity_probe;
use crate::linalg;
use crate::model::{check_assumptions, GradientPolicy, SampleRegion};
use crate::rng::{mix64, substream};
use crate::simulate::{estimate_moment_bound, second_moment_curve, simulate_forward, InitialLaw, TimeGrid};
use crate::smp::{compare_costs, issue_certificate, verify_hamiltonian_minimality, verify_transversality, Verdict};
use oracle::{ou_oracle, ou_tv};
use scenario::{load_scenario, ModelParams, Scenario};

/// Pipeline stages in execution order.
pub const STAGES: [&str; 6] = ["check", "simulate", "adjoint", "ergodicity", "ebsde", "smp"];

/// Published schema of the configuration file.
pub const CONFIG_SCHEMA: &str = include_str!("../../config.schema.json");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LawConfig {
    /// Feedback gain `K` of the candidate `u = −Kx`; the scenario default
    /// (the Riccati gain for LQ scenarios) when absent.
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub n_samples: usize,
    pub state_half_width: f64,
    pub control_half_width: f64,
    pub convexity_samples: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { n_samples: 4000, state_half_width: 4.0, control_half_width: 2.0, convexity_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Start of the moment curve.
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub record_every: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { x0: vec![3.0], horizon: 5.0, dt: 0.01, n_paths: 10_000, record_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub tol: f64,
    pub eval_window: f64,
    pub degree: usize,
    pub t_init: Option<f64>,
    pub max_horizons: usize,
    pub bound_paths: usize,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        AdjointConfig {
            n_paths: 10_000,
            dt: 0.02,
            tol: 0.02,
            eval_window: 1.0,
            degree: 3,
            t_init: None,
            max_horizons: 12,
            bound_paths: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicityConfig {
    pub t: f64,
    /// Gradient point is `x₀ + offset`.
    pub offset: f64,
    pub gradient_paths: usize,
    pub dt: f64,
    pub tangent_times: Vec<f64>,
    pub irreducibility_paths: usize,
    pub irreducibility_dt: f64,
    pub coupling_pairs: usize,
    /// Coupled pairs start at `x₀ ± s`.
    pub coupling_starts: Vec<f64>,
    pub moment_paths: usize,
}

impl Default for ErgodicityConfig {
    fn default() -> Self {
        ErgodicityConfig {
            t: 1.0,
            offset: 0.5,
            gradient_paths: 20_000,
            dt: 0.01,
            tangent_times: vec![0.5, 1.0, 2.0, 4.0],
            irreducibility_paths: 100_000,
            irreducibility_dt: 0.001,
            coupling_pairs: 20_000,
            coupling_starts: vec![1.0, 3.0, 5.0],
            moment_paths: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EbsdeConfig {
    pub discounts: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub degree: usize,
    pub long_run_paths: usize,
}

impl Default for EbsdeConfig {
    fn default() -> Self {
        EbsdeConfig { discounts: vec![0.4, 0.2, 0.1, 0.05], n_paths: 4000, dt: 0.02, degree: 3, long_run_paths: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmpConfig {
    /// Gains of the challenger feedbacks.
    pub challengers: Vec<f64>,
    /// Transversality horizons; `[4, 8, 16, 32]/k` capped at twice the solved
    /// adjoint horizon when absent.
    pub horizons: Option<Vec<f64>>,
    pub transversality_paths: usize,
    pub minimality_samples: usize,
    pub minimality_paths: usize,
    /// Relative minimality tolerance; three standard errors of H when absent.
    pub minimality_tol: Option<f64>,
    /// Long-run horizon and burn-in; `100/k` and `10/k` when absent.
    pub cost_horizon: Option<f64>,
    pub cost_burn_in: Option<f64>,
    pub cost_dt: f64,
    pub cost_paths: usize,
}

impl Default for SmpConfig {
    fn default() -> Self {
        SmpConfig {
            challengers: vec![0.2, 0.8, 1.2],
            horizons: None,
            transversality_paths: 4000,
            minimality_samples: 400,
            minimality_paths: 1000,
            minimality_tol: None,
            cost_horizon: None,
            cost_burn_in: None,
            cost_dt: 0.005,
            cost_paths: 2000,
        }
    }
}

/// One experiment: a scenario, a seed, the stages to run and their settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    /// Stage names or `all`; every stage when absent.
    #[serde(default)]
    pub stages: Option<Vec<String>>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub law: LawConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub adjoint: AdjointConfig,
    #[serde(default)]
    pub ergodicity: ErgodicityConfig,
    #[serde(default)]
    pub ebsde: EbsdeConfig,
    #[serde(default)]
    pub smp: SmpConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Stage names in execution order, with `all` expanded.
    pub fn resolved_stages(&self) -> Result<Vec<String>> {
        let requested = match &self.stages {
            None => vec!["all".to_string()],
            Some(s) => s.clone(),
        };
        if requested.is_empty() {
            return Err(Error::Config("no stages requested".into()));
        }
        for s in &requested {
            if s != "all" && !STAGES.contains(&s.as_str()) {
                return Err(Error::Config(format!("unknown stage '{s}'; expected one of all, {}", STAGES.join(", "))));
            }
        }
        let all = requested.iter().any(|s| s == "all");
        Ok(STAGES.iter().filter(|s| all || requested.iter().any(|r| r == *s)).map(|s| s.to_string()).collect())
    }
}

/// Named sub-seeds of the top-level seed.
pub fn stage_seeds(seed: u64) -> BTreeMap<String, u64> {
    ["model-check", "forward", "adjoint", "coupling", "ebsde", "smp"]
        .iter()
        .map(|s| (s.to_string(), substream(seed, s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub substreams: BTreeMap<String, u64>,
    pub config: RunConfig,
    pub files: Vec<FileRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed manifest: {e}")))
    }
}

fn digest(bytes: &[u8]) -> String {
    let mut h = mix64(bytes.len() as u64);
    for chunk in bytes.chunks(8) {
        let mut w = [0u8; 8];
        w[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(w));
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Ok,
    AssumptionFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::AssumptionFailure => 2,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 4,
        Error::MissingConstant(_) | Error::Ellipticity(_) => 2,
        Error::NoContraction(_) | Error::NotConverged(_) => 3,
        _ => 1,
    }
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub stage: String,
    pub quantity: String,
    pub estimate: String,
    pub target: String,
    pub verdict: String,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub manifest: Manifest,
    pub summary: Vec<SummaryRow>,
}

impl RunOutcome {
    pub fn summary_table(&self) -> String {
        let head = ["stage", "quantity", "estimate", "target", "verdict"];
        let rows: Vec<[&str; 5]> = self
            .summary
            .iter()
            .map(|r| [r.stage.as_str(), &r.quantity, &r.estimate, &r.target, &r.verdict])
            .collect();
        let mut w = head.map(str::len);
        for r in &rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.chars().count());
            }
        }
        let line = |cells: [&str; 5]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                let _ = write!(s, "{c:<width$}  ", width = w[i]);
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = format!("{} seed {}\n", self.manifest.scenario, self.manifest.seed);
        out += &line(head);
        out += &line(w.map(|n| &"------------------------------------------------------------"[..n.min(60)]));
        for r in rows {
            out += &line(r);
        }
        out
    }
}

struct Bundle {
    dir: PathBuf,
    files: Vec<FileRecord>,
    summary: Vec<SummaryRow>,
    log: String,
}

impl Bundle {
    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        self.files.push(FileRecord { path: rel.into(), bytes: contents.len(), digest: digest(contents.as_bytes()) });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(rel, &s)
    }

    fn row(&mut self, stage: &str, quantity: &str, estimate: String, target: Option<String>, ok: Option<bool>) {
        let verdict = match ok {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "-",
        };
        let _ = writeln!(self.log, "[{stage}] {quantity} = {estimate}");
        self.summary.push(SummaryRow {
            stage: stage.into(),
            quantity: quantity.into(),
            estimate,
            target: target.unwrap_or_else(|| "-".into()),
            verdict: verdict.into(),
        });
    }
}

fn pm(v: f64, ci: f64) -> String {
    format!("{v:.5} ± {ci:.5}")
}

#[derive(Serialize)]
struct AssumptionsOut<'a> {
    scenario: &'a str,
    passed: bool,
    declared: &'a crate::model::DeclaredConstants,
    report: crate::model::AssumptionReport,
    convexity: crate::hamiltonian::ConvexityReport,
}

#[derive(Serialize)]
struct AdjointSummary {
    horizon: f64,
    cauchy_gaps: Vec<(f64, f64)>,
    decay_slope: Option<f64>,
    expected_slope: Option<f64>,
    strictly_decreasing: Option<bool>,
    y_slope: f64,
    y_slope_oracle: Option<f64>,
    z_mean: f64,
    bound: crate::adjoint::BoundReport,
}

#[derive(Serialize)]
struct ErgodicitySummary {
    c_hat_moment: f64,
    gradient: Vec<crate::ergodicity::GradientCheck>,
    irreducibility: Vec<crate::ergodicity::IrreducibilityReport>,
    rho_hat: Vec<f64>,
    prefactor: crate::ergodicity::PrefactorFit,
}

#[derive(Serialize)]
struct EbsdeOut<'a> {
    solution: &'a crate::ebsde::ErgodicSolution,
    consistency: &'a crate::ebsde::LambdaConsistency,
    lambda_oracle: Option<f64>,
}

#[derive(Serialize)]
struct SmpOut<'a> {
    certificate: &'a crate::smp::SmpCertificate,
    lambda_oracle: Vec<(String, f64)>,
}

/// Execute the configured stages and write the bundle into `dir`.
pub fn run(config: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    let stages = config.resolved_stages()?;
    let sc = load_scenario(&config.scenario, &config.model)?;
    let n = sc.model.state_dim();
    let x0 = config.x0.clone().unwrap_or_else(|| sc.x0.clone());
    if x0.len() != n {
        return Err(Error::Config(format!("x0 has {} entries, the model has {n} states", x0.len())));
    }
    let gain = config.law.gain.unwrap_or(sc.default_gain);
    let law = sc.law(gain).with_label(gain_label(gain));
    let seeds = stage_seeds(config.seed);
    let has = |s: &str| stages.iter().any(|x| x == s);
    fs::create_dir_all(dir)?;
    let mut b = Bundle { dir: dir.to_path_buf(), files: Vec::new(), summary: Vec::new(), log: String::new() };
    let _ = writeln!(b.log, "scenario {} seed {} stages {}", sc.name, config.seed, stages.join(","));
    let mut status = RunStatus::Ok;
    let mut adjoint: Option<BsdeSolution> = None;

    if has("check") {
        info!("stage check");
        status = stage_check(&sc, config, seeds["model-check"], &mut b)?;
    }
    if status == RunStatus::Ok {
        if has("simulate") {
            info!("stage simulate");
            stage_simulate(&sc, config, &law, gain, seeds["forward"], &mut b)?;
        }
        if has("adjoint") {
            info!("stage adjoint");
            adjoint = Some(stage_adjoint(&sc, config, &law, &x0, seeds["adjoint"], &mut b)?);
        }
        if has("ergodicity") {
            info!("stage ergodicity");
            stage_ergodicity(&sc, config, &x0, seeds["coupling"], &mut b)?;
        }
        if has("ebsde") {
            info!("stage ebsde");
            stage_ebsde(&sc, config, &law, gain, &x0, seeds["ebsde"], &mut b)?;
        }
        if has("smp") {
            info!("stage smp");
            let sol = match adjoint.take() {
                Some(s) => s,
                None => load_adjoint(dir)?,
            };
            stage_smp(&sc, config, &law, gain, &x0, &sol, seeds["smp"], &mut b)?;
        }
    }
    let log = std::mem::take(&mut b.log);
    fs::write(dir.join("run.log"), log)?;
    let mut resolved = config.clone();
    resolved.stages = Some(stages.clone());
    let manifest = Manifest {
        tool: "ergolab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: sc.name.clone(),
        seed: config.seed,
        stages,
        substreams: seeds,
        config: resolved,
        files: b.files.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(RunOutcome { dir: dir.to_path_buf(), status, manifest, summary: b.summary })
}

/// Re-run a manifest into `dir` and compare every recorded file.
pub fn replay(manifest: &Manifest, dir: &Path) -> Result<RunOutcome> {
    let outcome = run(&manifest.config, dir)?;
    let fresh: BTreeMap<&str, &FileRecord> = outcome.manifest.files.iter().map(|f| (f.path.as_str(), f)).collect();
    let mismatched: Vec<&str> = manifest
        .files
        .iter()
        .filter(|f| fresh.get(f.path.as_str()).is_none_or(|g| g.digest != f.digest || g.bytes != f.bytes))
        .map(|f| f.path.as_str())
        .collect();
    if !mismatched.is_empty() || fresh.len() != manifest.files.len() {
        return Err(Error::NotConverged(format!("replay differs from the manifest in: {}", mismatched.join(", "))));
    }
    Ok(outcome)
}

fn load_adjoint(dir: &Path) -> Result<BsdeSolution> {
    let path = dir.join("adjoint.json");
    let text = fs::read_to_string(&path).map_err(|_| {
        Error::Config(format!(
            "stage smp needs an adjoint solution: add the adjoint stage or run it first into {}",
            dir.display()
        ))
    })?;
    let sol: BsdeSolution = serde_json::from_str(&text)?;
    Ok(sol.rehydrate())
}

fn stage_check(sc: &Scenario, config: &RunConfig, seed: u64, b: &mut Bundle) -> Result<RunStatus> {
    let c = &config.check;
    let (n, m) = (sc.model.state_dim(), sc.model.control_dim());
    let region = SampleRegion::new(vec![-c.state_half_width; n], vec![c.state_half_width; n], m)
        .with_controls(vec![-c.control_half_width; m], vec![c.control_half_width; m])
        .with_time(0.0, sc.model.period.unwrap_or(1.0));
    let report = check_assumptions(&sc.model, &region, c.n_samples, seed)?;
    let convexity = convexity_probe(&sc.model, &region, c.convexity_samples, substream(seed, "convexity"))?;
    let d = &report.dissipativity;
    b.row("check", "k pairwise", format!("{:.5}", d.k_pairwise), sc.model.constants.k.map(|k| format!("{k}")), Some(d.holds));
    b.row("check", "k gradient", format!("{:.5}", d.k_gradient), Some("k pairwise ± 10%".into()), Some(d.forms_agree));
    b.row(
        "check",
        "min singular value of σ",
        format!("{:.5}", report.ellipticity.min_singular_value),
        sc.model.constants.sigma_lo.map(|s| format!("≥ {s}")),
        Some(report.ellipticity.holds),
    );
    b.row("check", "H convex in (x,u)", format!("{:.3e}", convexity.worst_violation), None, Some(convexity.holds));
    let passed = report.passed();
    b.json(
        "assumptions.json",
        &AssumptionsOut { scenario: &sc.name, passed, declared: &sc.model.constants, report, convexity },
    )?;
    Ok(if passed { RunStatus::Ok } else { RunStatus::AssumptionFailure })
}

/// OU rate and noise of the closed loop under `u = −gain·x`, if known.
fn closed_loop_ou(sc: &Scenario, gain: f64) -> Option<(f64, f64)> {
    match sc.oracle.lq {
        Some(lq) => (gain - lq.a > 0.0).then_some((gain - lq.a, lq.sigma)),
        None if !sc.controlled || gain == sc.default_gain => sc.oracle.ou,
        None => None,
    }
}

fn gain_label(gain: f64) -> String {
    let short = format!("{gain:.4}");
    if short.parse::<f64>() == Ok(gain) {
        format!("K={gain}")
    } else {
        format!("K≈{short}")
    }
}

fn lambda_oracle(sc: &Scenario, gain: f64) -> Option<f64> {
    sc.oracle.lambda_of_gain(gain).or(if gain == sc.default_gain || !sc.controlled { sc.oracle.lambda } else { None })
}

fn stage_simulate(sc: &Scenario, config: &RunConfig, law: &ControlLaw, gain: f64, seed: u64, b: &mut Bundle) -> Result<()> {
    let c = &config.simulate;
    let x0 = &c.x0;
    if x0.len() != sc.model.state_dim() {
        return Err(Error::Config("simulate.x0 does not match the state dimension".into()));
    }
    let grid = TimeGrid::with_step(c.horizon, c.dt)?;
    let curve = second_moment_curve(&sc.model, law, &grid, x0, c.n_paths, seed, c.record_every)?;
    let fit = estimate_moment_bound(&curve)?;
    let ou = closed_loop_ou(sc, gain);
    let mut csv = String::from("t,mean_square,std_err,oracle\n");
    let mut worst: f64 = 0.0;
    let mut within = true;
    for ((t, m), s) in curve.times.iter().zip(&curve.mean_square).zip(&curve.std_err) {
        let exact = match ou {
            Some((k, sig)) => {
                let o = ou_oracle(k, sig, x0[0], *t)?;
                let e = o.mean * o.mean + o.variance;
                if *t > 0.0 {
                    worst = worst.max((m - e).abs() / e);
                    within &= (m - e).abs() <= 0.03 * e + 3.0 * s;
                }
                format!("{e}")
            }
            None => String::new(),
        };
        let _ = writeln!(csv, "{t},{m},{s},{exact}");
    }
    b.write("forward/moments.csv", &csv)?;
    b.json("forward/moment_fit.json", &fit)?;
    b.row("simulate", "moment decay rate μ", format!("{:.4}", fit.mu_hat), Some("|x₀|²e^{-μt} + 1.05ĉ".into()), Some(fit.bound_holds));
    b.row("simulate", "stationary E|X|²", format!("{:.4}", fit.c_hat), None, None);
    if ou.is_some() {
        b.row("simulate", "max rel. error vs OU", format!("{worst:.4}"), Some("≤ 3% + 3 SE".into()), Some(within));
    }
    Ok(())
}

fn stage_adjoint(sc: &Scenario, config: &RunConfig, law: &ControlLaw, x0: &[f64], seed: u64, b: &mut Bundle) -> Result<BsdeSolution> {
    let c = &config.adjoint;
    let k = sc.k()?;
    let mut p = IhParams::new(k, x0.to_vec(), seed);
    p.n_paths = c.n_paths;
    p.dt = c.dt;
    p.tol = c.tol;
    p.eval_window = c.eval_window;
    p.t_init = c.t_init;
    p.max_horizons = c.max_horizons;
    p.basis = RegressionBasis::polynomial(c.degree);
    let sol = solve_ih_adjoint(&sc.model, law, &p)?;
    let grid = TimeGrid::with_step(c.eval_window, c.dt)?;
    let ens = simulate_forward(&sc.model, law, &grid, c.bound_paths, x0, substream(seed, "bound"))?;
    let bound = verify_bound(&sol, &ens, k, sc.model.constants.grad_cost_bound)?;
    let pts = test_points(&p.initial, p.n_test, substream(seed, "test"));
    let xs: Vec<f64> = pts.iter().map(|x| x[0]).collect();
    let ys: Vec<f64> = pts.iter().map(|x| sol.y_at_slice(0, x)[0]).collect();
    let z_mean = pts.iter().map(|x| sol.z_at_slice(0, x)[0]).sum::<f64>() / pts.len() as f64;
    let (_, y_slope, _) = linalg::linear_fit(&xs, &ys);
    let d = &sol.diagnostics;
    let summary = AdjointSummary {
        horizon: d.horizon,
        cauchy_gaps: d.cauchy_history.iter().map(|c| (c.horizon, c.gap)).collect(),
        decay_slope: d.decay_slope,
        expected_slope: d.expected_slope,
        strictly_decreasing: d.strictly_decreasing,
        y_slope,
        y_slope_oracle: sc.oracle.adjoint_slope.filter(|_| config.law.gain.is_none()),
        z_mean,
        bound: bound.clone(),
    };
    b.row("adjoint", "solved horizon", format!("{}", d.horizon), None, d.strictly_decreasing);
    if let (Some(s), Some(e)) = (d.decay_slope, d.expected_slope) {
        b.row("adjoint", "Cauchy gap log-slope", format!("{s:.4}"), Some(format!("{e:.4}")), d.slope_consistent);
    }
    match summary.y_slope_oracle {
        Some(o) => b.row("adjoint", "slope of Y(0,·)", format!("{y_slope:.5}"), Some(format!("{o:.6}")), Some((y_slope / o - 1.0).abs() <= 0.05)),
        None => b.row("adjoint", "slope of Y(0,·)", format!("{y_slope:.5}"), None, None),
    }
    if !bound.skipped {
        b.row("adjoint", "sup |Y|", format!("{:.5}", bound.sup_norm), bound.bound.map(|v| format!("≤ {v:.5}")), Some(bound.holds));
    }
    b.json("adjoint.json", &sol)?;
    b.json("adjoint_summary.json", &summary)?;
    Ok(sol)
}

fn stage_ergodicity(sc: &Scenario, config: &RunConfig, x0: &[f64], seed: u64, b: &mut Bundle) -> Result<()> {
    let c = &config.ergodicity;
    let model = &sc.model;
    let (n, m) = (model.state_dim(), model.control_dim());
    // The semigroup of a fixed control; the tangent process ignores feedback.
    let law = ControlLaw::zero(m);
    let k = sc.k()?;
    let constants = FellerConstants::from_model(model)?;
    let x: Vec<f64> = x0.iter().map(|v| v + c.offset).collect();
    let mut h = vec![0.0; n];
    h[0] = 1.0;
    let policy = GradientPolicy::AnalyticOnly;

    let mut gradient = Vec::new();
    let mut csv = String::from("psi,bismut_elworthy,be_ci95,finite_difference,fd_ci95,joint_ci95,agree,bound,within_bound\n");
    for (i, (name, psi)) in test_functions().into_iter().enumerate() {
        let g = check_gradient(model, &law, name, &psi, 1.0, &constants, c.t, &x, &h, c.gradient_paths, c.dt, substream(seed, &format!("gradient-{i}")), policy)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            g.psi, g.bismut_elworthy.estimate.mean, g.bismut_elworthy.ci95, g.finite_difference.estimate.mean, g.finite_difference.ci95, g.joint_ci95, g.agree, g.bound, g.within_bound
        );
        b.row(
            "ergodicity",
            &format!("∇P_t ψ, ψ = {name}"),
            pm(g.bismut_elworthy.estimate.mean, g.bismut_elworthy.ci95),
            Some(format!("fd {:.5}, |·| ≤ {:.4}", g.finite_difference.estimate.mean, g.bound)),
            Some(g.agree && g.within_bound),
        );
        gradient.push(g);
    }
    b.write("ergodicity/gradient.csv", &csv)?;

    let tangent = check_tangent_moments(model, &law, &constants, &x, &h, &c.tangent_times, c.gradient_paths.min(5000), c.dt, substream(seed, "tangent"), policy)?;
    let mut csv = String::from("t,mean_square,std_err,bound,holds\n");
    for p in &tangent {
        let _ = writeln!(csv, "{},{},{},{},{}", p.t, p.mean_square, p.std_err, p.bound, p.holds);
    }
    b.write("ergodicity/tangent.csv", &csv)?;
    b.row("ergodicity", "tangent moment bound", format!("{} times", tangent.len()), None, Some(tangent.iter().all(|p| p.holds)));

    let ou = sc.oracle.uncontrolled_ou;
    let (target, radius) = match ou {
        Some((k, s)) => {
            let o = ou_oracle(k, s, x0[0], c.t)?;
            let mut t = x0.to_vec();
            t[0] = o.mean;
            (t, o.variance.sqrt())
        }
        None => (x0.to_vec(), 0.5),
    };
    let mut tail = x0.to_vec();
    tail[0] += 6.0;
    let mut irreducibility = Vec::new();
    let mut csv = String::from("target,radius,hits,n_paths,p_hat,wilson_lo,wilson_hi,detected,upper_bound,proxy_probability,paths_needed\n");
    for (label, tgt, r) in [("sd-ball", target, radius), ("tail", tail, 0.1)] {
        let rep = irreducibility_probe(model, &law, x0, c.t, &tgt, r, c.irreducibility_paths, c.irreducibility_dt, substream(seed, label))?;
        let (detected, ub) = match rep.verdict {
            HitVerdict::Detected => (true, String::new()),
            HitVerdict::Undetected { upper_bound } => (false, format!("{upper_bound}")),
        };
        let _ = writeln!(
            csv,
            "{:?},{},{},{},{},{},{},{},{},{},{}",
            rep.target, rep.radius, rep.hits, rep.n_paths, rep.p_hat, rep.wilson95.0, rep.wilson95.1, detected, ub, rep.proxy_probability,
            rep.paths_needed.map(|v| v.to_string()).unwrap_or_default()
        );
        let target = if label == "sd-ball" { ou.map(|_| "0.683 (1-sd ball)".to_string()) } else { None };
        let estimate = if detected { format!("{:.5}", rep.p_hat) } else { format!("undetected, p ≤ {ub}") };
        b.row("ergodicity", &format!("hit probability, {label}"), estimate, target, None);
        irreducibility.push(rep);
    }
    b.write("ergodicity/irreducibility.csv", &csv)?;

    let grid = TimeGrid::with_step(5.0 / k, c.dt)?;
    let curve = second_moment_curve(model, &law, &grid, x0, c.moment_paths, substream(seed, "moments"), 10)?;
    let c_hat = match estimate_moment_bound(&curve) {
        Ok(f) if !f.inconclusive && f.c_hat > 0.0 => f.c_hat,
        _ => *curve.mean_square.last().expect("moment curve"),
    };
    let params = CouplingParams::defaults(k, c_hat, n, c.coupling_pairs, substream(seed, "pairs"))?;
    let mut fits = Vec::new();
    let mut csv = String::from("x,y,t,tv_hat,ci95,tv_exact\n");
    for s in &c.coupling_starts {
        let mut xa = x0.to_vec();
        let mut ya = x0.to_vec();
        xa[0] += s;
        ya[0] -= s;
        let f = coupling_tv(model, &law, &xa, &ya, &params)?;
        let mut dominated = true;
        for ((t, v), ci) in f.times.iter().zip(&f.tv_hat).zip(&f.ci95) {
            let exact = match ou {
                Some((k, sig)) => {
                    let e = ou_tv(k, sig, xa[0], ya[0], *t)?;
                    dominated &= v + ci >= e;
                    format!("{e}")
                }
                None => String::new(),
            };
            let _ = writeln!(csv, "{},{},{t},{v},{ci},{exact}", xa[0], ya[0]);
        }
        b.row(
            "ergodicity",
            &format!("TV decay ρ̂, x = ±{s}"),
            format!("{:.4}", f.rho_hat),
            ou.map(|_| "tv_hat ≥ exact TV".into()),
            Some(f.rho_hat > 0.0 && (ou.is_none() || dominated)),
        );
        fits.push(f);
    }
    b.write("ergodicity/coupling.csv", &csv)?;
    let prefactor = fit_prefactor(&fits)?;
    let mut csv = String::from("weight,prefactor\n");
    for (w, p) in prefactor.weights.iter().zip(&prefactor.prefactors) {
        let _ = writeln!(csv, "{w},{p}");
    }
    b.write("ergodicity/prefactor.csv", &csv)?;
    b.row(
        "ergodicity",
        "prefactor vs 1+|x|²+|y|²",
        format!("r² {:.3}", prefactor.r_squared),
        Some("monotone, r² > 0.8".into()),
        Some(prefactor.monotone && prefactor.r_squared > 0.8),
    );
    b.json(
        "ergodicity/summary.json",
        &ErgodicitySummary { c_hat_moment: c_hat, gradient, irreducibility, rho_hat: fits.iter().map(|f| f.rho_hat).collect(), prefactor },
    )?;
    Ok(())
}

fn stage_ebsde(sc: &Scenario, config: &RunConfig, law: &ControlLaw, gain: f64, x0: &[f64], seed: u64, b: &mut Bundle) -> Result<()> {
    let c = &config.ebsde;
    let k = sc.k()?;
    let mut p = DiscountParams::new(x0.to_vec(), seed);
    p.n_paths = c.n_paths;
    p.dt = c.dt;
    p.basis = RegressionBasis::polynomial(c.degree);
    let sol = solve_ebsde(&sc.model, law, &c.discounts, x0, &p)?;
    let mut cp = ConsistencyParams::new(k, x0.to_vec(), p);
    cp.long_run_paths = c.long_run_paths;
    let cons = check_lambda_consistency(&sc.model, law, &sol, &cp)?;
    let oracle = lambda_oracle(sc, gain);
    for e in &cons.estimates {
        let ok = oracle.map(|o| (e.value / o - 1.0).abs() <= 0.05);
        b.row("ebsde", &format!("λ {}", e.name), pm(e.value, e.ci95), oracle.map(|o| format!("{o:.6}")), ok);
    }
    b.row("ebsde", "pairwise within 2 CIs", format!("{} pairs", cons.pairwise.len()), None, Some(cons.passed));
    b.json("ebsde.json", &EbsdeOut { solution: &sol, consistency: &cons, lambda_oracle: oracle })?;
    b.write("ebsde/lambda.csv", &cons.to_csv())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn stage_smp(sc: &Scenario, config: &RunConfig, law: &ControlLaw, gain: f64, x0: &[f64], sol: &BsdeSolution, seed: u64, b: &mut Bundle) -> Result<()> {
    let c = &config.smp;
    let cc = &config.check;
    let k = sc.k()?;
    let model = &sc.model;
    let (n, m) = (model.state_dim(), model.control_dim());
    let region = SampleRegion::new(vec![-cc.state_half_width; n], vec![cc.state_half_width; n], m)
        .with_controls(vec![-cc.control_half_width; m], vec![cc.control_half_width; m])
        .with_time(0.0, model.period.unwrap_or(1.0));
    let convexity = convexity_probe(model, &region, cc.convexity_samples, substream(seed, "convexity"))?;
    let grid = TimeGrid::new(0.0, sol.grid.t_end, sol.grid.n_steps)?;
    let ens = simulate_forward(model, law, &grid, c.minimality_paths, x0, substream(seed, "minimality-paths"))?;
    let minimality = verify_hamiltonian_minimality(
        model,
        law,
        sol,
        &ens,
        c.minimality_tol,
        c.minimality_samples,
        substream(seed, "minimality"),
        GradientPolicy::AnalyticOnly,
    )?;
    let challengers: Vec<ControlLaw> = c.challengers.iter().map(|g| sc.law(*g).with_label(gain_label(*g))).collect();
    let solved = sol.diagnostics.horizon.max(sol.grid.t_end);
    let horizons = match &c.horizons {
        Some(h) => h.clone(),
        None => [4.0, 8.0, 16.0, 32.0].iter().map(|h| h / k).filter(|h| *h <= 2.0 * solved).collect(),
    };
    let curves = verify_transversality(model, law, &challengers, sol, &horizons, x0, sol.grid.dt(), c.transversality_paths, substream(seed, "transversality"))?;
    let costs = compare_costs(
        model,
        law,
        &challengers,
        &InitialLaw::Point(x0.to_vec()),
        c.cost_horizon.unwrap_or(100.0 / k),
        c.cost_burn_in.unwrap_or(10.0 / k),
        c.cost_dt,
        c.cost_paths,
        substream(seed, "costs"),
    )?;

    let mut csv = String::from("challenger,horizon,value,ci95\n");
    for cu in &curves {
        for p in &cu.points {
            let _ = writeln!(csv, "{},{},{},{}", cu.challenger, p.horizon, p.value, p.ci95);
        }
    }
    b.write("smp/transversality.csv", &csv)?;
    b.write("smp/costs.csv", &costs.to_csv())?;

    b.row("smp", "sup Hamiltonian gap", format!("{:.3e}", minimality.sup_gap), Some(format!("≤ {:.3e}", minimality.tol * minimality.h_scale)), Some(minimality.passed));
    for cu in &curves {
        let e = cu.exponent.map(|e| format!("{e:.3}")).unwrap_or_else(|| if cu.identically_zero { "≡ 0".into() } else { "diverges".into() });
        b.row("smp", &format!("transversality exponent, {}", cu.challenger), e, Some("≤ -0.8".into()), Some(cu.decaying));
    }
    let mut lambda_oracle = Vec::new();
    for (r, g) in std::iter::once(&costs.candidate).chain(&costs.challengers).zip(std::iter::once(gain).chain(c.challengers.iter().copied())) {
        let o = sc.oracle.lambda_of_gain(g);
        if let Some(o) = o {
            lambda_oracle.push((r.law.clone(), o));
        }
        b.row(
            "smp",
            &format!("λ̂({}), gap", r.law),
            format!("{}, {:+.5}", pm(r.lambda_hat, r.ci95), r.gap),
            o.map(|o| format!("{o:.6} (2% + CI)")),
            o.map(|o| (r.lambda_hat - o).abs() <= 0.02 * o + r.ci95),
        );
    }
    let cert = issue_certificate(&convexity, minimality, curves, costs);
    let verdict = match &cert.verdict {
        Verdict::Certified => "certified".to_string(),
        Verdict::Violated { witness } => format!("violated: {witness}"),
        Verdict::Inconclusive { reason } => format!("inconclusive: {reason}"),
    };
    b.row("smp", "certificate", verdict, None, None);
    b.json("smp.json", &SmpOut { certificate: &cert, lambda_oracle })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_resolution() {
        let mut c = RunConfig::from_toml("scenario = \"lq-1d\"").unwrap();
        assert_eq!(c.resolved_stages().unwrap(), STAGES.to_vec());
        c.stages = Some(vec!["smp".into(), "check".into()]);
        assert_eq!(c.resolved_stages().unwrap(), vec!["check", "smp"]);
        c.stages = Some(vec![]);
        let e = c.resolved_stages().unwrap_err();
        assert!(e.to_string().contains("no stages requested"));
        assert_eq!(exit_code(&e), 4);
        c.stages = Some(vec!["bogus".into()]);
        assert!(c.resolved_stages().is_err());
    }

    #[test]
    fn malformed_configs_are_config_errors() {
        for text in ["scenario = 3", "scenario = \"lq-1d\"\n[adjoint]\nnonsense = 1", "seed = 1"] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(exit_code(&e), 4, "{text}");
        }
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        let a = stage_seeds(7);
        let b = stage_seeds(7);
        assert_eq!(a, b);
        let mut v: Vec<u64> = a.values().copied().collect();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 6);
        assert_ne!(stage_seeds(8)["forward"], a["forward"]);
    }

    #[test]
    fn check_stage_on_lq_and_nondissipative() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::from_toml("scenario = \"lq-1d\"\nstages = [\"check\"]").unwrap();
        let out = run(&c, dir.path()).unwrap();
        assert_eq!(out.status, RunStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("assumptions.json")).unwrap()).unwrap();
        let k = v["report"]["dissipativity"]["k_hat"].as_f64().unwrap();
        assert!((k - 1.0).abs() < 1e-9, "{k}");
        c.scenario = "nondissipative-1d".into();
        let out = run(&c, dir.path()).unwrap();
        assert_eq!(out.status.exit_code(), 2);
    }

    #[test]
    fn smp_without_adjoint_is_actionable() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::from_toml("scenario = \"lq-1d\"\nstages = [\"smp\"]").unwrap();
        let e = run(&c, dir.path()).err().unwrap();
        assert_eq!(exit_code(&e), 4);
        assert!(e.to_string().contains("adjoint"));
    }

    #[test]
    fn schema_lists_every_section() {
        let schema: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        let props = schema["properties"].as_object().unwrap();
        let c = serde_json::to_value(RunConfig::from_toml("scenario = \"lq-1d\"").unwrap()).unwrap();
        for key in c.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "schema lacks {key}");
        }
    }
}
