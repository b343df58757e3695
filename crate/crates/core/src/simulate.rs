//! Euler–Maruyama simulation of the controlled SDE, the tangent (velocity)
//! process, and moment / long-run-cost estimators.
//!
//! Each path `p` draws its Brownian increments from its own stream keyed by
//! `(seed, p)`. Two consequences follow and are relied on downstream:
//! laws simulated with the same seed share increments exactly (common random
//! numbers), and any parallel schedule yields bit-identical output because
//! per-path results are reduced in path order.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlLaw;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ControlledDiffusion, GradientPolicy};
use crate::rng::{mix64, path_rng, substream};
use crate::stats::Estimate;

/// `‖X‖` beyond which a path is declared divergent.
pub const BLOW_UP_NORM: f64 = 1e8;

/// Paths per reduction block for streaming estimators.
const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > t_start) || n_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs t_end > t_start and n_steps >= 1 (got [{t_start}, {t_end}], {n_steps})"
            )));
        }
        Ok(TimeGrid { t_start, t_end, n_steps })
    }

    /// Grid on `[0, horizon]` with step as close to `dt` as divides evenly.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        Self::new(0.0, horizon, ((horizon / dt).round() as usize).max(1))
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.t_start + i as f64 * self.dt()
    }

    /// Index of the grid point nearest to `t`, clamped to the grid.
    pub fn index_of(&self, t: f64) -> usize {
        (((t - self.t_start) / self.dt()).round().max(0.0) as usize).min(self.n_steps)
    }
}

/// Distribution of the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Independent Gaussian coordinates around `mean`.
    Gaussian { mean: Vec<f64>, sd: f64 },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn centre(&self) -> &[f64] {
        match self {
            InitialLaw::Point(x) => x,
            InitialLaw::Gaussian { mean, .. } => mean,
        }
    }

    fn draw(&self, seed: u64, path: usize, out: &mut [f64]) {
        match self {
            InitialLaw::Point(x) => out.copy_from_slice(x),
            InitialLaw::Gaussian { mean, sd } => {
                let mut rng = path_rng(substream(seed, "initial"), path as u64);
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = m + sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
}

/// Seeded bundle of simulated paths on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub seed: u64,
    pub initial: InitialLaw,
    pub model_name: String,
    pub law_label: String,
    /// `[path][step 0..=n_steps][dim]`
    states: Vec<f64>,
    /// `[path][step 0..n_steps][control_dim]`, the control applied on each step.
    controls: Vec<f64>,
    /// `[path][step 0..n_steps][dim]`
    increments: Vec<f64>,
}

impl PathEnsemble {
    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let n = self.state_dim;
        let off = (path * (self.grid.n_steps + 1) + step) * n;
        &self.states[off..off + n]
    }

    #[inline]
    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let m = self.control_dim;
        let off = (path * self.grid.n_steps + step) * m;
        &self.controls[off..off + m]
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let n = self.state_dim;
        let off = (path * self.grid.n_steps + step) * n;
        &self.increments[off..off + n]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.grid.n_steps)
    }

    /// Mean of `‖X_t‖²` over paths at grid index `step`.
    pub fn mean_square(&self, step: usize) -> Estimate {
        let v: Vec<f64> = (0..self.n_paths).map(|p| linalg::dot(self.state(p, step), self.state(p, step))).collect();
        Estimate::from_samples(&v)
    }

    /// Deterministic digest of the stored arrays.
    pub fn digest(&self) -> u64 {
        let mut h = mix64(self.seed);
        for v in self.states.iter().chain(&self.controls).chain(&self.increments) {
            h = mix64(h ^ v.to_bits());
        }
        h
    }

    /// Write `states.csv`, `controls.csv`, `increments.csv` and
    /// `manifest.json` into `dir`.
    pub fn write_csv_dir(&self, dir: &Path, model: &ControlledDiffusion) -> Result<()> {
        fs::create_dir_all(dir)?;
        let n = self.state_dim;
        let m = self.control_dim;
        write_table(&dir.join("states.csv"), self, n, self.grid.n_steps + 1, |p, i| self.state(p, i), "x")?;
        write_table(&dir.join("controls.csv"), self, m, self.grid.n_steps, |p, i| self.control(p, i), "u")?;
        write_table(&dir.join("increments.csv"), self, n, self.grid.n_steps, |p, i| self.increment(p, i), "dw")?;
        let manifest = EnsembleManifest {
            seed: self.seed,
            grid: self.grid,
            n_paths: self.n_paths,
            initial: self.initial.clone(),
            model: self.model_name.clone(),
            model_fingerprint: model_fingerprint(model),
            law: self.law_label.clone(),
            digest: self.digest(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn write_table<'e>(
    file: &Path,
    e: &'e PathEnsemble,
    cols: usize,
    rows: usize,
    get: impl Fn(usize, usize) -> &'e [f64],
    prefix: &str,
) -> Result<()> {
    let mut out = String::from("path,step,t");
    for j in 0..cols {
        out.push_str(&format!(",{prefix}{j}"));
    }
    out.push('\n');
    for p in 0..e.n_paths {
        for i in 0..rows {
            out.push_str(&format!("{p},{i},{}", e.grid.time(i)));
            for v in get(p, i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    fs::File::create(file)?.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub seed: u64,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub initial: InitialLaw,
    pub model: String,
    pub model_fingerprint: u64,
    pub law: String,
    pub digest: u64,
}

/// Hash of the model name and its coefficients at fixed probe points.
pub fn model_fingerprint(model: &ControlledDiffusion) -> u64 {
    let n = model.state_dim();
    let m = model.control_dim();
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in model.name.as_bytes() {
        h = mix64(h ^ u64::from(*b));
    }
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * n];
    for probe in [-1.5f64, -0.5, 0.0, 0.7, 2.0] {
        let x: Vec<f64> = (0..n).map(|j| probe + 0.1 * j as f64).collect();
        let u: Vec<f64> = (0..m).map(|j| 0.3 * probe - 0.05 * j as f64).collect();
        let t = 0.25 * probe.abs();
        model.drift_into(t, &x, &u, &mut b);
        model.diffusion_into(t, &x, &u, &mut s);
        let l = model.cost(t, &x, &u);
        for v in b.iter().chain(&s).chain(std::iter::once(&l)) {
            h = mix64(h ^ v.to_bits());
        }
    }
    h
}

/// Returns a warning when `dt` exceeds the explicit-scheme stability proxy
/// `1 / (4 K̄²)`.
pub fn stability_warning(kbar_hat: f64, dt: f64) -> Option<String> {
    let limit = 1.0 / (4.0 * kbar_hat * kbar_hat);
    (dt > limit).then(|| format!("dt = {dt} exceeds the stability proxy 1/(4 K̄²) = {limit:.4e}"))
}

/// Receives every grid point of a path during streaming simulation.
pub trait PathVisitor: Send {
    fn begin_path(&mut self, _path: usize) {}
    /// Called for `step = 0..=n_steps`; `u` is the control applied on
    /// `[t_step, t_step+1)` (at the terminal point, the law evaluated there).
    fn visit(&mut self, step: usize, t: f64, x: &[f64], u: &[f64]);
    fn end_path(&mut self, _path: usize) {}
}

struct Scratch {
    x: Vec<f64>,
    u: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
    dw: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, m: usize) -> Self {
        Scratch { x: vec![0.0; n], u: vec![0.0; m], b: vec![0.0; n], s: vec![0.0; n * n], dw: vec![0.0; n] }
    }
}

fn check_inputs(model: &ControlledDiffusion, law: &ControlLaw, initial: &InitialLaw) -> Result<()> {
    if law.dim() != model.control_dim() {
        return Err(Error::Dimension(format!(
            "law {} has dimension {}, model {} expects {}",
            law.label,
            law.dim(),
            model.name,
            model.control_dim()
        )));
    }
    if initial.dim() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "initial state has dimension {}, model expects {}",
            initial.dim(),
            model.state_dim()
        )));
    }
    Ok(())
}

/// Simulate one path, calling `on_step(i, t_i, X_i, u_i, ΔW_i)` for each
/// step and `on_point(i, t_i, X_i, u_i)` for each grid point.
#[allow(clippy::too_many_arguments)]
#[inline]
fn run_path(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    grid: &TimeGrid,
    initial: &InitialLaw,
    seed: u64,
    path: usize,
    sc: &mut Scratch,
    on_point: impl FnMut(usize, f64, &[f64], &[f64], Option<&[f64]>),
) -> Result<()> {
    let mut rng = path_rng(seed, path as u64);
    initial.draw(seed, path, &mut sc.x);
    run_steps(model, law, grid, 0..grid.n_steps, &mut rng, path, sc, on_point)
}

/// Euler steps `steps` of `grid` from the state in `sc.x`. `on_point` sees
/// every grid point of the range with its own index relative to the start,
/// the increment being `None` at the final point.
#[allow(clippy::too_many_arguments)]
fn run_steps(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    grid: &TimeGrid,
    steps: std::ops::Range<usize>,
    rng: &mut ChaCha8Rng,
    path: usize,
    sc: &mut Scratch,
    mut on_point: impl FnMut(usize, f64, &[f64], &[f64], Option<&[f64]>),
) -> Result<()> {
    let n = sc.x.len();
    let dt = grid.dt();
    let sqdt = dt.sqrt();
    let first = steps.start;
    let last = steps.end;
    for i in steps {
        let t = grid.time(i);
        law.eval_into(t, &sc.x, &mut sc.u);
        for w in sc.dw.iter_mut() {
            *w = sqdt * rng.sample::<f64, _>(StandardNormal);
        }
        on_point(i - first, t, &sc.x, &sc.u, Some(&sc.dw));
        model.drift_into(t, &sc.x, &sc.u, &mut sc.b);
        model.diffusion_into(t, &sc.x, &sc.u, &mut sc.s);
        let mut norm2 = 0.0;
        for r in 0..n {
            let mut noise = 0.0;
            for c in 0..n {
                noise += sc.s[r * n + c] * sc.dw[c];
            }
            sc.x[r] += sc.b[r] * dt + noise;
            norm2 += sc.x[r] * sc.x[r];
        }
        if !(norm2.sqrt() <= BLOW_UP_NORM) {
            return Err(Error::BlowUp { path, step: i + 1, norm: norm2.sqrt() });
        }
    }
    let t = grid.time(last);
    law.eval_into(t, &sc.x, &mut sc.u);
    on_point(last - first, t, &sc.x, &sc.u, None);
    Ok(())
}

/// Simulate and store a full ensemble started from the point `x0`.
pub fn simulate_forward(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    grid: &TimeGrid,
    n_paths: usize,
    x0: &[f64],
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_forward_from(model, law, grid, &InitialLaw::Point(x0.to_vec()), n_paths, seed)
}

/// Simulate and store a full ensemble with a random initial state.
pub fn simulate_forward_from(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    grid: &TimeGrid,
    initial: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_inputs(model, law, initial)?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let n = model.state_dim();
    let m = model.control_dim();
    let ns = grid.n_steps;
    let mut states = vec![0.0; n_paths * (ns + 1) * n];
    let mut controls = vec![0.0; n_paths * ns * m];
    let mut increments = vec![0.0; n_paths * ns * n];

    let results: Vec<Result<()>> = states
        .par_chunks_mut((ns + 1) * n)
        .zip(controls.par_chunks_mut((ns * m).max(1)))
        .zip(increments.par_chunks_mut(ns * n))
        .enumerate()
        .map(|(p, ((st, ct), inc))| {
            let mut sc = Scratch::new(n, m);
            run_path(model, law, grid, initial, seed, p, &mut sc, |i, _, x, u, dw| {
                st[i * n..(i + 1) * n].copy_from_slice(x);
                if let Some(dw) = dw {
                    ct[i * m..(i + 1) * m].copy_from_slice(u);
                    inc[i * n..(i + 1) * n].copy_from_slice(dw);
                }
            })
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(PathEnsemble {
        grid: *grid,
        n_paths,
        state_dim: n,
        control_dim: m,
        seed,
        initial: initial.clone(),
        model_name: model.name.clone(),
        law_label: law.label.clone(),
        states,
        controls,
        increments,
    })
}

/// Paths recorded only at block boundaries (state and generator position),
/// regenerated one block at a time. Blocks reproduce exactly the paths of
/// [`simulate_forward_from`] with the same seed.
#[derive(Debug, Clone)]
pub struct CheckpointedPaths {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub seed: u64,
    pub initial: InitialLaw,
    pub block_len: usize,
    model_name: String,
    law_label: String,
    /// `[block][path][state]`
    states: Vec<f64>,
    /// `[block][path]`
    positions: Vec<u128>,
}

impl CheckpointedPaths {
    pub fn n_blocks(&self) -> usize {
        self.grid.n_steps.div_ceil(self.block_len)
    }

    /// Step range `[start, end]` of block `b`.
    pub fn block_range(&self, b: usize) -> (usize, usize) {
        let start = b * self.block_len;
        (start, (start + self.block_len).min(self.grid.n_steps))
    }

    /// Regenerate block `b` as an ensemble on its own sub-grid.
    pub fn block(&self, model: &ControlledDiffusion, law: &ControlLaw, b: usize) -> Result<PathEnsemble> {
        if b >= self.n_blocks() {
            return Err(Error::InvalidArgument(format!("block {b} out of range")));
        }
        let (s0, s1) = self.block_range(b);
        let n = self.state_dim;
        let m = self.control_dim;
        let ns = s1 - s0;
        let sub = TimeGrid { t_start: self.grid.time(s0), t_end: self.grid.time(s1), n_steps: ns };
        let mut states = vec![0.0; self.n_paths * (ns + 1) * n];
        let mut controls = vec![0.0; self.n_paths * ns * m];
        let mut increments = vec![0.0; self.n_paths * ns * n];
        let results: Vec<Result<()>> = states
            .par_chunks_mut((ns + 1) * n)
            .zip(controls.par_chunks_mut((ns * m).max(1)))
            .zip(increments.par_chunks_mut(ns * n))
            .enumerate()
            .map(|(p, ((st, ct), inc))| {
                let mut sc = Scratch::new(n, m);
                let off = b * self.n_paths + p;
                sc.x.copy_from_slice(&self.states[off * n..(off + 1) * n]);
                let mut rng = path_rng(self.seed, p as u64);
                rng.set_word_pos(self.positions[off]);
                run_steps(model, law, &self.grid, s0..s1, &mut rng, p, &mut sc, |i, _, x, u, dw| {
                    st[i * n..(i + 1) * n].copy_from_slice(x);
                    if let Some(dw) = dw {
                        ct[i * m..(i + 1) * m].copy_from_slice(u);
                        inc[i * n..(i + 1) * n].copy_from_slice(dw);
                    }
                })
            })
            .collect();
        results.into_iter().collect::<Result<Vec<()>>>()?;
        Ok(PathEnsemble {
            grid: sub,
            n_paths: self.n_paths,
            state_dim: n,
            control_dim: m,
            seed: self.seed,
            initial: self.initial.clone(),
            model_name: self.model_name.clone(),
            law_label: self.law_label.clone(),
            states,
            controls,
            increments,
        })
    }
}

/// Simulate once, keeping only block-boundary checkpoints.
pub fn simulate_checkpointed(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    grid: &TimeGrid,
    initial: &InitialLaw,
    n_paths: usize,
    seed: u64,
    block_len: usize,
) -> Result<CheckpointedPaths> {
    check_inputs(model, law, initial)?;
    if n_paths == 0 || block_len == 0 {
        return Err(Error::InvalidArgument("n_paths and block_len must be at least 1".into()));
    }
    let n = model.state_dim();
    let m = model.control_dim();
    let n_blocks = grid.n_steps.div_ceil(block_len);
    let per_path: Vec<Result<(Vec<f64>, Vec<u128>)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut sc = Scratch::new(n, m);
            let mut rng = path_rng(seed, p as u64);
            initial.draw(seed, p, &mut sc.x);
            let mut st = Vec::with_capacity(n_blocks * n);
            let mut pos = Vec::with_capacity(n_blocks);
            for b in 0..n_blocks {
                st.extend_from_slice(&sc.x);
                pos.push(rng.get_word_pos());
                let s0 = b * block_len;
                let s1 = (s0 + block_len).min(grid.n_steps);
                run_steps(model, law, grid, s0..s1, &mut rng, p, &mut sc, |_, _, _, _, _| {})?;
            }
            Ok((st, pos))
        })
        .collect();
    let mut states = vec![0.0; n_blocks * n_paths * n];
    let mut positions = vec![0u128; n_blocks * n_paths];
    for (p, r) in per_path.into_iter().enumerate() {
        let (st, pos) = r?;
        for b in 0..n_blocks {
            let off = b * n_paths + p;
            states[off * n..(off + 1) * n].copy_from_slice(&st[b * n..(b + 1) * n]);
            positions[off] = pos[b];
        }
    }
    Ok(CheckpointedPaths {
        grid: *grid,
        n_paths,
        state_dim: n,
        control_dim: m,
        seed,
        initial: initial.clone(),
        block_len,
        model_name: model.name.clone(),
        law_label: law.label.clone(),
        states,
        positions,
    })
}

/// Stream paths through visitors without storing them. One visitor is made
/// per block of consecutive paths; blocks are returned in path order.
pub fn simulate_visit<V: PathVisitor>(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    grid: &TimeGrid,
    initial: &InitialLaw,
    n_paths: usize,
    seed: u64,
    make: impl Fn() -> V + Sync,
) -> Result<Vec<V>> {
    check_inputs(model, law, initial)?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let n = model.state_dim();
    let m = model.control_dim();
    let n_blocks = n_paths.div_ceil(BLOCK);
    let results: Vec<Result<V>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut v = make();
            let mut sc = Scratch::new(n, m);
            for p in (b * BLOCK)..((b + 1) * BLOCK).min(n_paths) {
                v.begin_path(p);
                run_path(model, law, grid, initial, seed, p, &mut sc, |i, t, x, u, _| v.visit(i, t, x, u))?;
                v.end_path(p);
            }
            Ok(v)
        })
        .collect();
    results.into_iter().collect()
}

struct TerminalCollector {
    n_steps: usize,
    out: Vec<Vec<f64>>,
}

impl PathVisitor for TerminalCollector {
    fn visit(&mut self, step: usize, _t: f64, x: &[f64], _u: &[f64]) {
        if step == self.n_steps {
            self.out.push(x.to_vec());
        }
    }
}

/// Terminal states `X_T` of every path, in path order.
pub fn terminal_states(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    grid: &TimeGrid,
    initial: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let blocks = simulate_visit(model, law, grid, initial, n_paths, seed, || TerminalCollector {
        n_steps: grid.n_steps,
        out: Vec::new(),
    })?;
    Ok(blocks.into_iter().flat_map(|b| b.out).collect())
}

/// Directional derivative of the flow, `V^h`, along each path.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPaths {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dim: usize,
    /// `[path][step 0..=n_steps][dim]`
    values: Vec<f64>,
}

impl TangentPaths {
    #[inline]
    pub fn value(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.n_steps + 1) + step) * self.dim;
        &self.values[off..off + self.dim]
    }

    pub fn mean_square(&self, step: usize) -> Estimate {
        let v: Vec<f64> = (0..self.n_paths).map(|p| linalg::dot(self.value(p, step), self.value(p, step))).collect();
        Estimate::from_samples(&v)
    }
}

/// Tangent process `V_{i+1} = V_i + ∇ₓb V_i dt + (∇ₓσ · V_i) ΔW_i`,
/// `V_0 = h`, driven by the ensemble's own increments.
///
/// Controls are frozen at their recorded values along each path, so no
/// `∂u/∂x` term enters even for feedback laws.
pub fn simulate_tangent(
    model: &ControlledDiffusion,
    ensemble: &PathEnsemble,
    direction: &[f64],
    policy: GradientPolicy,
) -> Result<TangentPaths> {
    let n = model.state_dim();
    if direction.len() != n || ensemble.state_dim != n {
        return Err(Error::Dimension("tangent direction does not match state dimension".into()));
    }
    let grid = ensemble.grid;
    let ns = grid.n_steps;
    let dt = grid.dt();
    let mut values = vec![0.0; ensemble.n_paths * (ns + 1) * n];
    let results: Vec<Result<()>> = values
        .par_chunks_mut((ns + 1) * n)
        .enumerate()
        .map(|(p, out)| {
            let mut jb = vec![0.0; n * n];
            let mut js = vec![0.0; n * n * n];
            let mut v = direction.to_vec();
            let mut next = vec![0.0; n];
            out[..n].copy_from_slice(&v);
            for i in 0..ns {
                let t = grid.time(i);
                let x = ensemble.state(p, i);
                let u = ensemble.control(p, i);
                let dw = ensemble.increment(p, i);
                model.drift_jacobian_x(t, x, u, policy, &mut jb)?;
                model.diffusion_jacobian_x(t, x, u, policy, &mut js)?;
                for r in 0..n {
                    let mut acc = v[r];
                    for c in 0..n {
                        acc += jb[r * n + c] * v[c] * dt;
                        // (∇ₓσ·V)_{rc} = Σ_l ∂σ_rc/∂x_l V_l
                        let mut sv = 0.0;
                        for l in 0..n {
                            sv += js[(r * n + c) * n + l] * v[l];
                        }
                        acc += sv * dw[c];
                    }
                    next[r] = acc;
                }
                v.copy_from_slice(&next);
                out[(i + 1) * n..(i + 2) * n].copy_from_slice(&v);
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(TangentPaths { n_paths: ensemble.n_paths, n_steps: ns, dim: n, values })
}

/// Second-moment curve `t ↦ E‖X_t‖²` on recorded grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCurve {
    pub times: Vec<f64>,
    pub mean_square: Vec<f64>,
    pub std_err: Vec<f64>,
    pub initial_norm_sq: f64,
    pub n_paths: usize,
}

impl MomentCurve {
    pub fn from_ensemble(ensemble: &PathEnsemble) -> Self {
        let mut times = Vec::new();
        let mut mean_square = Vec::new();
        let mut std_err = Vec::new();
        for i in 0..=ensemble.grid.n_steps {
            let e = ensemble.mean_square(i);
            times.push(ensemble.grid.time(i));
            mean_square.push(e.mean);
            std_err.push(e.std_err);
        }
        let c = ensemble.initial.centre();
        MomentCurve { times, mean_square, std_err, initial_norm_sq: linalg::dot(c, c), n_paths: ensemble.n_paths }
    }

    /// Estimate at the recorded time nearest to `t`.
    pub fn at(&self, t: f64) -> Estimate {
        let i = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Estimate { mean: self.mean_square[i], std_err: self.std_err[i], n: self.n_paths }
    }
}

struct MomentAcc {
    every: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl PathVisitor for MomentAcc {
    fn visit(&mut self, step: usize, _t: f64, x: &[f64], _u: &[f64]) {
        if step.is_multiple_of(self.every) {
            let k = step / self.every;
            let v = linalg::dot(x, x);
            self.sum[k] += v;
            self.sum_sq[k] += v * v;
        }
    }
}

/// Stream `E‖X_t‖²` at every `every`-th grid point without storing paths.
pub fn second_moment_curve(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    grid: &TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    every: usize,
) -> Result<MomentCurve> {
    let every = every.max(1);
    let k = grid.n_steps / every + 1;
    let blocks = simulate_visit(model, law, grid, &InitialLaw::Point(x0.to_vec()), n_paths, seed, || MomentAcc {
        every,
        sum: vec![0.0; k],
        sum_sq: vec![0.0; k],
    })?;
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    for b in &blocks {
        for j in 0..k {
            sum[j] += b.sum[j];
            sum_sq[j] += b.sum_sq[j];
        }
    }
    let nf = n_paths as f64;
    let mean_square: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std_err = sum_sq
        .iter()
        .zip(&mean_square)
        .map(|(s2, m)| {
            let var = if n_paths > 1 { ((s2 / nf - m * m) * nf / (nf - 1.0)).max(0.0) } else { 0.0 };
            (var / nf).sqrt()
        })
        .collect();
    Ok(MomentCurve {
        times: (0..k).map(|j| grid.time(j * every)).collect(),
        mean_square,
        std_err,
        initial_norm_sq: linalg::dot(x0, x0),
        n_paths,
    })
}

/// Fit of `E‖X_t‖² ≈ A e^{-μt} + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentFit {
    pub mu_hat: f64,
    pub c_hat: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    /// `E‖X_t‖² ≤ ‖x₀‖² e^{-μ̂t} + 1.05 ĉ` at every recorded point, up to
    /// three standard errors.
    pub bound_holds: bool,
    pub inconclusive: bool,
}

/// Fit the exponential moment bound: for each candidate asymptote `c` on a
/// grid, regress `log(m(t) - c)` on `t` over points where `m - c` stands
/// clear of noise, and keep the `c` with the smallest squared residual of
/// the reconstructed curve.
pub fn estimate_moment_bound(curve: &MomentCurve) -> Result<MomentFit> {
    let m = &curve.mean_square;
    if m.len() < 3 {
        return Err(Error::InvalidArgument("moment curve needs at least 3 points".into()));
    }
    let m_min = m.iter().copied().fold(f64::INFINITY, f64::min);
    let m_max = m.iter().copied().fold(0.0f64, f64::max);
    let mut best: Option<(f64, f64, f64, f64, f64)> = None; // (sse, c, a, mu, r2)
    let n_grid = 400;
    for g in 0..n_grid {
        let c = if m_min > 0.0 { m_min * g as f64 / n_grid as f64 } else { 0.0 };
        let floor = 1e-3 * (m_max - c).max(1e-300);
        let (ts, ls): (Vec<f64>, Vec<f64>) = curve
            .times
            .iter()
            .zip(m)
            .zip(&curve.std_err)
            .filter(|((_, v), se)| **v - c > (3.0 * **se).max(floor))
            .map(|((t, v), _)| (*t, (v - c).ln()))
            .unzip();
        if ts.len() < 3 {
            continue;
        }
        let (icpt, slope, r2) = linalg::linear_fit(&ts, &ls);
        let a = icpt.exp();
        let sse: f64 = curve.times.iter().zip(m).map(|(t, v)| (c + a * (slope * t).exp() - v).powi(2)).sum();
        if best.is_none_or(|b| sse < b.0) {
            best = Some((sse, c, a, -slope, r2));
        }
        if m_min <= 0.0 {
            break;
        }
    }
    let Some((_, c_hat, amplitude, mu_hat, r_squared)) = best else {
        return Ok(MomentFit {
            mu_hat: f64::NAN,
            c_hat: f64::NAN,
            amplitude: f64::NAN,
            r_squared: 0.0,
            bound_holds: false,
            inconclusive: true,
        });
    };
    let bound_holds = curve
        .times
        .iter()
        .zip(m)
        .zip(&curve.std_err)
        .all(|((t, v), se)| *v <= curve.initial_norm_sq * (-mu_hat * t).exp() + c_hat * 1.05 + 3.0 * se + 1e-12);
    Ok(MomentFit {
        mu_hat,
        c_hat,
        amplitude,
        r_squared,
        bound_holds,
        inconclusive: r_squared < 0.5 || !(mu_hat > 0.0),
    })
}

/// Long-run average cost with its Monte Carlo interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRunEstimate {
    pub lambda_hat: f64,
    pub std_err: f64,
    pub ci95: f64,
    pub horizon: f64,
    pub burn_in: f64,
    pub n_paths: usize,
    /// Per-path time averages, in path order.
    #[serde(skip)]
    pub per_path: Vec<f64>,
}

impl LongRunEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate { mean: self.lambda_hat, std_err: self.std_err, n: self.n_paths }
    }
}

struct CostAcc<'a> {
    burn_idx: usize,
    dt: f64,
    prev: f64,
    current: f64,
    out: Vec<f64>,
    model: &'a ControlledDiffusion,
}

impl PathVisitor for CostAcc<'_> {
    fn begin_path(&mut self, _path: usize) {
        self.current = 0.0;
    }

    fn visit(&mut self, step: usize, t: f64, x: &[f64], u: &[f64]) {
        let l = self.model.cost(t, x, u);
        if step > self.burn_idx {
            self.current += 0.5 * (self.prev + l) * self.dt;
        }
        self.prev = l;
    }

    fn end_path(&mut self, _path: usize) {
        self.out.push(self.current);
    }
}

/// `λ̂ = (T - burn_in)⁻¹ · mean_paths ∫_{burn_in}^T L dt`, trapezoidal.
#[allow(clippy::too_many_arguments)]
pub fn long_run_average(
    model: &ControlledDiffusion,
    law: &ControlLaw,
    initial: &InitialLaw,
    horizon: f64,
    burn_in: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<LongRunEstimate> {
    if !(horizon > burn_in) || burn_in < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "need horizon > burn_in >= 0, got horizon {horizon}, burn_in {burn_in}"
        )));
    }
    let grid = TimeGrid::with_step(horizon, dt)?;
    let burn_idx = grid.index_of(burn_in);
    let span = grid.time(grid.n_steps) - grid.time(burn_idx);
    let blocks = simulate_visit(model, law, &grid, initial, n_paths, seed, || CostAcc {
        burn_idx,
        dt: grid.dt(),
        prev: 0.0,
        current: 0.0,
        out: Vec::new(),
        model,
    })?;
    let per_path: Vec<f64> = blocks.into_iter().flat_map(|b| b.out).map(|v| v / span).collect();
    let e = Estimate::from_samples(&per_path);
    Ok(LongRunEstimate {
        lambda_hat: e.mean,
        std_err: e.std_err,
        ci95: e.ci95(),
        horizon,
        burn_in,
        n_paths,
        per_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou(k: f64, sigma: f64) -> ControlledDiffusion {
        ControlledDiffusion::builder("ou", 1, 1)
            .drift_1d(move |_, x, _| -k * x)
            .diffusion_1d(move |_, _, _| sigma)
            .drift_x_1d(move |_, _, _| -k)
            .diffusion_x_1d(|_, _, _| 0.0)
            .cost_1d(|_, x, _| x * x)
            .build()
            .unwrap()
    }

    #[test]
    fn degenerate_dynamics_stay_put() {
        let m = ControlledDiffusion::builder("zero", 2, 1).build().unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let e = simulate_forward(&m, &ControlLaw::zero(1), &g, 5, &[1.5, -2.0], 1).unwrap();
        for p in 0..5 {
            for i in 0..=10 {
                assert_eq!(e.state(p, i), &[1.5, -2.0]);
            }
        }
    }

    #[test]
    fn ensembles_are_bit_reproducible() {
        let m = ou(1.0, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let a = simulate_forward(&m, &ControlLaw::zero(1), &g, 300, &[1.0], 9).unwrap();
        let b = simulate_forward(&m, &ControlLaw::zero(1), &g, 300, &[1.0], 9).unwrap();
        assert_eq!(a, b);
        let c = simulate_forward(&m, &ControlLaw::zero(1), &g, 300, &[1.0], 10).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn checkpointed_blocks_reproduce_the_full_ensemble() {
        let m = ou(1.0, 1.0);
        let g = TimeGrid::new(0.0, 2.0, 47).unwrap();
        let init = InitialLaw::Gaussian { mean: vec![0.5], sd: 1.0 };
        let full = simulate_forward_from(&m, &ControlLaw::linear_feedback_1d(0.3), &g, &init, 30, 6).unwrap();
        let ck = simulate_checkpointed(&m, &ControlLaw::linear_feedback_1d(0.3), &g, &init, 30, 6, 10).unwrap();
        assert_eq!(ck.n_blocks(), 5);
        for b in 0..ck.n_blocks() {
            let blk = ck.block(&m, &ControlLaw::linear_feedback_1d(0.3), b).unwrap();
            let (s0, s1) = ck.block_range(b);
            for p in 0..30 {
                for i in 0..=(s1 - s0) {
                    assert_eq!(blk.state(p, i), full.state(p, s0 + i));
                }
                for i in 0..(s1 - s0) {
                    assert_eq!(blk.increment(p, i), full.increment(p, s0 + i));
                    assert_eq!(blk.control(p, i), full.control(p, s0 + i));
                }
            }
            assert_eq!(blk.grid.time(0), g.time(s0));
        }
    }

    #[test]
    fn growing_n_paths_keeps_earlier_paths() {
        let m = ou(1.0, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let a = simulate_forward(&m, &ControlLaw::zero(1), &g, 10, &[1.0], 3).unwrap();
        let b = simulate_forward(&m, &ControlLaw::zero(1), &g, 40, &[1.0], 3).unwrap();
        for p in 0..10 {
            assert_eq!(a.terminal(p), b.terminal(p));
        }
    }

    #[test]
    fn laws_share_increments_under_common_seed() {
        let m = ControlledDiffusion::builder("lin", 1, 1)
            .drift_1d(|_, x, u| -x + u)
            .diffusion_1d(|_, _, _| 1.0)
            .build()
            .unwrap();
        let g = TimeGrid::new(0.0, 2.0, 40).unwrap();
        let a = simulate_forward(&m, &ControlLaw::linear_feedback_1d(0.2), &g, 50, &[0.5], 4).unwrap();
        let b = simulate_forward(&m, &ControlLaw::linear_feedback_1d(1.2), &g, 50, &[0.5], 4).unwrap();
        for p in 0..50 {
            for i in 0..40 {
                assert_eq!(a.increment(p, i), b.increment(p, i));
            }
        }
    }

    #[test]
    fn increments_have_brownian_moments() {
        let m = ou(1.0, 1.0);
        let g = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let n_paths = 10_000;
        let e = simulate_forward(&m, &ControlLaw::zero(1), &g, n_paths, &[0.0], 5).unwrap();
        let dt = g.dt();
        for i in 0..10 {
            let v: Vec<f64> = (0..n_paths).map(|p| e.increment(p, i)[0]).collect();
            let s = Estimate::from_samples(&v);
            assert!(s.mean.abs() <= 5.0 * (dt / n_paths as f64).sqrt());
            let var = s.std_err * s.std_err * n_paths as f64;
            assert!((var / dt - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let m = ControlledDiffusion::builder("exp", 1, 1).drift_1d(|_, x, _| 50.0 * x).build().unwrap();
        let g = TimeGrid::new(0.0, 2.0, 20).unwrap();
        let err = simulate_forward(&m, &ControlLaw::zero(1), &g, 3, &[1.0], 1).unwrap_err();
        assert!(matches!(err, Error::BlowUp { path: 0, .. }), "{err}");
    }

    #[test]
    fn zero_direction_tangent_vanishes() {
        let m = ou(1.0, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let e = simulate_forward(&m, &ControlLaw::zero(1), &g, 10, &[1.0], 1).unwrap();
        let v = simulate_tangent(&m, &e, &[0.0], GradientPolicy::AnalyticOnly).unwrap();
        assert!((0..10).all(|p| (0..=20).all(|i| v.value(p, i)[0] == 0.0)));
    }

    #[test]
    fn ou_tangent_is_deterministic_decay() {
        let m = ou(1.0, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let e = simulate_forward(&m, &ControlLaw::zero(1), &g, 4, &[1.0], 1).unwrap();
        let v = simulate_tangent(&m, &e, &[1.0], GradientPolicy::AnalyticOnly).unwrap();
        for p in 0..4 {
            assert!((v.value(p, 1000)[0] - (-1f64).exp()).abs() < 1e-3);
        }
    }

    #[test]
    fn tangent_without_gradients_needs_fallback() {
        let m = ControlledDiffusion::builder("nog", 1, 1).drift_1d(|_, x, _| -x).build().unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let e = simulate_forward(&m, &ControlLaw::zero(1), &g, 2, &[1.0], 1).unwrap();
        let err = simulate_tangent(&m, &e, &[1.0], GradientPolicy::AnalyticOnly).unwrap_err();
        assert!(err.to_string().contains("finite-difference"));
        assert!(simulate_tangent(&m, &e, &[1.0], GradientPolicy::AllowFiniteDifference).is_ok());
    }

    #[test]
    fn deterministic_decay_moment_fit() {
        let m = ou(1.0, 0.0);
        let g = TimeGrid::new(0.0, 4.0, 4000).unwrap();
        let c = second_moment_curve(&m, &ControlLaw::zero(1), &g, &[3.0], 4, 1, 40).unwrap();
        let f = estimate_moment_bound(&c).unwrap();
        assert!(f.c_hat <= 0.01, "{f:?}");
        assert!((f.mu_hat - 2.0).abs() < 0.02, "{f:?}");
        assert!(!f.inconclusive);
    }

    #[test]
    fn expanding_drift_moment_fit_is_flagged() {
        let m = ControlledDiffusion::builder("exp", 1, 1)
            .drift_1d(|_, x, _| x)
            .diffusion_1d(|_, _, _| 1.0)
            .build()
            .unwrap();
        let g = TimeGrid::new(0.0, 3.0, 300).unwrap();
        let c = second_moment_curve(&m, &ControlLaw::zero(1), &g, &[1.0], 500, 2, 10).unwrap();
        let f = estimate_moment_bound(&c).unwrap();
        assert!(f.inconclusive || f.mu_hat <= 0.0, "{f:?}");
    }

    #[test]
    fn constant_cost_long_run_average_is_one() {
        let m = ControlledDiffusion::builder("one", 1, 1)
            .drift_1d(|_, x, _| -x)
            .diffusion_1d(|_, _, _| 1.0)
            .cost_1d(|_, _, _| 1.0)
            .build()
            .unwrap();
        let e = long_run_average(&m, &ControlLaw::zero(1), &InitialLaw::Point(vec![0.0]), 10.0, 2.0, 0.01, 20, 1)
            .unwrap();
        assert!((e.lambda_hat - 1.0).abs() < 1e-12);
        assert!(e.std_err < 1e-12);
    }

    #[test]
    fn long_run_rejects_bad_window() {
        let m = ou(1.0, 1.0);
        let r = long_run_average(&m, &ControlLaw::zero(1), &InitialLaw::Point(vec![0.0]), 1.0, 1.0, 0.1, 2, 1);
        assert!(r.is_err());
    }
}
