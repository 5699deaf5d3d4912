//! Experiment runner: JSON configs in, CSV artifacts and a JSON manifest
//! out. Every run is reproducible from its config alone: all seeds are
//! explicit, numeric output uses shortest round-trip formatting, and the
//! manifest records a hash of the exact config bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ospde::noise::{sample_backward_noise, BackwardNoisePath, ForwardPathBatch};
use ospde::problem::{
    build_problem, validate_hypotheses, ObstacleProblem, ProblemConfig, SpaceTimeField,
    SpaceTimeGrid, SpaceTimeVecField,
};
use ospde::solver::{extract_measure, penalization_sweep, psor_oracle, solve_penalized};
use ospde::verify::{
    lemma_calculus, lemma_gradient_decay, lemma_obstacle_smoothing, mazur_combine,
    verify_bsde_residual, verify_energy_identity, verify_skorokhod, GradientDecaySource,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ospde::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const CONFIG_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// config schema
// ---------------------------------------------------------------------------

/// Explicit seeds; no wall-clock defaults anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub noise: u64,
    pub paths: u64,
    pub probes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    /// Path count for residual / Skorokhod / smoothing estimates.
    pub paths: usize,
    /// Path count for the energy identity.
    pub energy_paths: usize,
    /// Probe count for hypothesis validation.
    pub probe_count: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { paths: 10_000, energy_paths: 100_000, probe_count: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Monotonicity defect bound for noise-free instances.
    pub monotonicity_deterministic: f64,
    /// Monotonicity defect bound when h is nonzero.
    pub monotonicity_stochastic: f64,
    /// Residual discretization allowance constant c in c(Δt + Δx),
    /// calibrated once at desk scale and frozen.
    pub residual_allowance_c: f64,
    /// Energy-identity allowance constant.
    pub energy_allowance_c: f64,
    /// Required sup-distance to the PSOR oracle at the last schedule level.
    pub oracle_sup_distance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            monotonicity_deterministic: 1e-8,
            monotonicity_stochastic: 1e-6,
            residual_allowance_c: 0.05,
            energy_allowance_c: 0.05,
            oracle_sup_distance: 5e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checks {
    pub hypotheses: bool,
    pub bsde_residual: bool,
    pub skorokhod: bool,
    /// Off by default: the energy identity needs g = h = 0, Φ = 0 and a
    /// nonnegative f; enable it on such instances only.
    pub energy_identity: bool,
}

impl Default for Checks {
    fn default() -> Self {
        Self { hypotheses: true, bsde_residual: true, skorokhod: true, energy_identity: false }
    }
}

/// Deterministic space-time density selected by config, used by the lemma
/// suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { value: f64 },
    /// Indicator of a centered box, `amp · 1_{|x - center| < half_width}`.
    IndicatorBump { center: Vec<f64>, half_width: f64, amp: f64 },
    GaussianBump { center: Vec<f64>, width: f64, amp: f64 },
}

impl FieldSpec {
    pub fn materialize(&self, grid: &SpaceTimeGrid) -> SpaceTimeField {
        SpaceTimeField::from_fn(grid, |_k, idx| {
            let p = grid.position(idx);
            let x = &p[..grid.dim];
            match self {
                FieldSpec::Constant { value } => *value,
                FieldSpec::IndicatorBump { center, half_width, amp } => {
                    let inside = center
                        .iter()
                        .zip(x)
                        .all(|(c, xi)| (xi - c).abs() < *half_width);
                    if inside {
                        *amp
                    } else {
                        0.0
                    }
                }
                FieldSpec::GaussianBump { center, width, amp } => {
                    let r2: f64 =
                        center.iter().zip(x).map(|(c, xi)| (xi - c) * (xi - c)).sum();
                    amp * (-r2 / (2.0 * width * width)).exp()
                }
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaConfig {
    /// Random piecewise-linear profiles checked by the calculus lemma.
    pub calculus_cases: usize,
    /// Killing-rate schedule for the gradient-decay fits.
    pub gradient_schedule: Vec<f64>,
    /// Rate schedule for obstacle smoothing.
    pub smoothing_schedule: Vec<f64>,
    pub smoothing_delta: f64,
    /// Density driving the gradient-decay lemma (also used, via its
    /// primitive, for the divergence variant).
    pub density: FieldSpec,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        Self {
            calculus_cases: 10_000,
            gradient_schedule: vec![4.0, 16.0, 64.0, 256.0],
            smoothing_schedule: vec![4.0, 16.0, 64.0, 256.0],
            smoothing_delta: 0.05,
            density: FieldSpec::IndicatorBump { center: vec![0.0], half_width: 1.0, amp: 1.0 },
        }
    }
}

/// Full run description. Unknown keys are rejected so config typos cannot
/// silently change an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub problem: ProblemConfig,
    /// Strictly increasing penalization schedule.
    pub schedule: Vec<u32>,
    /// Penalty level for `solve`; defaults to the last schedule entry.
    #[serde(default)]
    pub level: Option<u32>,
    pub seeds: Seeds,
    #[serde(default)]
    pub monte_carlo: McConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub lemmas: LemmaConfig,
}

/// Reads and validates a config file; returns the config together with the
/// SHA-256 hash of the raw bytes.
pub fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let bytes = fs::read(path)?;
    let cfg: RunConfig = serde_json::from_slice(&bytes)?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "unsupported config version {} (expected {})",
            cfg.version, CONFIG_VERSION
        )));
    }
    if cfg.schedule.is_empty() || cfg.schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Config("schedule must be nonempty and strictly increasing".into()));
    }
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok((cfg, hex::encode(hasher.finalize())))
}

// ---------------------------------------------------------------------------
// outcomes and manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, statistic: f64, tolerance: f64, pass: bool) -> Self {
        Self { name: name.into(), statistic, tolerance, pass }
    }
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub checks: Vec<CheckOutcome>,
    pub diagnostics: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
}

impl RunSummary {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    config_hash: &'a str,
    crate_version: &'a str,
    checks: &'a [CheckOutcome],
    diagnostics: &'a serde_json::Value,
    outputs: Vec<String>,
    wall_time_s: f64,
}

/// Writes a file atomically (temp file in the same directory, then rename).
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_manifest(out_dir: &Path, config_hash: &str, summary: &RunSummary) -> Result<PathBuf> {
    let manifest = Manifest {
        schema_version: CONFIG_VERSION,
        command: &summary.command,
        config_hash,
        crate_version: env!("CARGO_PKG_VERSION"),
        checks: &summary.checks,
        diagnostics: &summary.diagnostics,
        outputs: summary
            .outputs
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
        wall_time_s: summary.wall_time_s,
    };
    let path = out_dir.join("manifest.json");
    let mut body = serde_json::to_vec_pretty(&manifest)?;
    body.push(b'\n');
    write_atomic(&path, &body)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// CSV writers (shortest round-trip float formatting via Display)
// ---------------------------------------------------------------------------

fn field_csv(grid: &SpaceTimeGrid, field: &SpaceTimeField, value_name: &str) -> String {
    let mut s = String::from("k,t");
    for a in 0..grid.dim {
        s.push_str(if a == 0 { ",x" } else { ",y" });
    }
    s.push(',');
    s.push_str(value_name);
    s.push('\n');
    for k in 0..=grid.nt {
        let t = grid.t(k);
        let slice = field.slice(k);
        for (i, v) in slice.iter().enumerate() {
            let p = grid.position(i);
            s.push_str(&format!("{k},{t}"));
            for a in 0..grid.dim {
                s.push_str(&format!(",{}", p[a]));
            }
            s.push_str(&format!(",{v}\n"));
        }
    }
    s
}

fn sparse_field_csv(grid: &SpaceTimeGrid, field: &SpaceTimeField, value_name: &str) -> String {
    let mut s = String::from("k,t");
    for a in 0..grid.dim {
        s.push_str(if a == 0 { ",x" } else { ",y" });
    }
    s.push(',');
    s.push_str(value_name);
    s.push('\n');
    for k in 0..=grid.nt {
        let t = grid.t(k);
        let slice = field.slice(k);
        for (i, v) in slice.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let p = grid.position(i);
            s.push_str(&format!("{k},{t}"));
            for a in 0..grid.dim {
                s.push_str(&format!(",{}", p[a]));
            }
            s.push_str(&format!(",{v}\n"));
        }
    }
    s
}

fn write_csv(out_dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let path = out_dir.join(name);
    write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// shared pipeline pieces
// ---------------------------------------------------------------------------

fn instance(cfg: &RunConfig) -> Result<ObstacleProblem> {
    Ok(build_problem(&cfg.problem)?)
}

fn backward_noise(cfg: &RunConfig, problem: &ObstacleProblem) -> Result<BackwardNoisePath> {
    Ok(sample_backward_noise(
        cfg.seeds.noise,
        problem.grid.nt,
        problem.coeffs.d1,
        problem.grid.dt(),
    )?)
}

fn has_noise_coefficient(problem: &ObstacleProblem) -> bool {
    problem
        .coeffs
        .h
        .iter()
        .any(|c| *c != ospde::problem::ScalarCoeff::Zero)
}

fn hypothesis_check(cfg: &RunConfig, problem: &ObstacleProblem) -> Result<CheckOutcome> {
    let report = validate_hypotheses(
        &problem.coeffs,
        &problem.grid,
        cfg.monte_carlo.probe_count,
        cfg.seeds.probes,
    )?;
    Ok(CheckOutcome::new("hypotheses_margin", report.margin, 0.0, report.pass))
}

/// Sup distance between two space-time fields over interior-core nodes.
pub fn sup_distance_core(grid: &SpaceTimeGrid, a: &SpaceTimeField, b: &SpaceTimeField) -> f64 {
    let core = grid.core_nodes();
    let mut worst: f64 = 0.0;
    for k in 0..=grid.nt {
        let (sa, sb) = (a.slice(k), b.slice(k));
        for &i in &core {
            worst = worst.max((sa[i] - sb[i]).abs());
        }
    }
    worst
}

/// Per-level sup distance of penalized solutions to the PSOR oracle.
pub struct OracleRow {
    pub level: u32,
    pub sup_distance_core: f64,
}

pub fn oracle_comparison(
    problem: &ObstacleProblem,
    schedule: &[u32],
    noise: &BackwardNoisePath,
) -> Result<Vec<OracleRow>> {
    let oracle = psor_oracle(problem)?;
    let mut rows = Vec::with_capacity(schedule.len());
    for &n in schedule {
        let sol = solve_penalized(problem, n, noise)?;
        rows.push(OracleRow {
            level: n,
            sup_distance_core: sup_distance_core(&problem.grid, &sol.u, &oracle),
        });
    }
    Ok(rows)
}

/// Cumulative primitive of a scalar density along axis 0, so its discrete
/// divergence reproduces the density (used by the div-g lemma variant).
pub fn primitive_along_x(grid: &SpaceTimeGrid, f: &SpaceTimeField) -> SpaceTimeVecField {
    let mut g = SpaceTimeVecField::zeros(grid);
    let d = grid.dim;
    let dx = grid.dx(0);
    let stride = if d == 1 { 1 } else { grid.nx[1] };
    let lanes = if d == 1 { 1 } else { grid.nx[1] };
    for k in 0..=grid.nt {
        let fs = f.slice(k);
        let gs = g.slice_mut(k);
        for lane in 0..lanes {
            let mut acc = 0.0;
            for i in 0..grid.nx[0] {
                let idx = i * stride + lane;
                acc += fs[idx] * dx;
                gs[idx * d] = acc;
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

/// Solves one penalized instance and writes the solution field, the
/// discrete measure and the manifest.
pub fn cmd_solve(cfg: &RunConfig, config_hash: &str, out_dir: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let problem = instance(cfg)?;
    let noise = backward_noise(cfg, &problem)?;
    let level = cfg.level.unwrap_or(*cfg.schedule.last().expect("validated nonempty"));

    let mut checks = Vec::new();
    if cfg.checks.hypotheses {
        checks.push(hypothesis_check(cfg, &problem)?);
    }
    let sol = solve_penalized(&problem, level, &noise)?;
    let measure = extract_measure(&sol, &problem);
    checks.push(CheckOutcome::new(
        "solution_finite",
        sol.u.max_abs(),
        f64::INFINITY,
        sol.u.is_finite(),
    ));
    checks.push(CheckOutcome::new(
        "measure_complementarity",
        measure.complementarity_defect,
        0.0,
        measure.complementarity_defect == 0.0,
    ));

    let mut outputs = Vec::new();
    outputs.push(write_csv(out_dir, "solution.csv", &field_csv(&problem.grid, &sol.u, "u"))?);
    outputs.push(write_csv(
        out_dir,
        "measure.csv",
        &sparse_field_csv(&problem.grid, &measure.cell_masses, "mass"),
    )?);

    let mut summary = RunSummary {
        command: "solve".into(),
        checks,
        diagnostics: serde_json::json!({
            "level": level,
            "stiffness_dt_n": problem.grid.dt() * level as f64,
            "measure_total_mass": measure.total_mass,
            "measure_support_cells": measure.support_cells,
        }),
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let manifest = write_manifest(out_dir, config_hash, &summary)?;
    summary.outputs.push(manifest);
    Ok(summary)
}

/// Runs the penalization sweep and writes its report.
pub fn cmd_sweep(cfg: &RunConfig, config_hash: &str, out_dir: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let problem = instance(cfg)?;
    let noise = backward_noise(cfg, &problem)?;
    let tol = if has_noise_coefficient(&problem) {
        cfg.tolerances.monotonicity_stochastic
    } else {
        cfg.tolerances.monotonicity_deterministic
    };

    let mut checks = Vec::new();
    if cfg.checks.hypotheses {
        checks.push(hypothesis_check(cfg, &problem)?);
    }
    let (_sols, report) = penalization_sweep(&problem, &cfg.schedule, &noise, tol)?;
    let worst = report.monotonicity_defects.iter().cloned().fold(0.0, f64::max);
    checks.push(CheckOutcome::new("monotonicity_defect", worst, tol, report.flagged.is_empty()));

    let mut body = String::from(
        "level,measure_mass,limit_complementarity,monotonicity_defect_from_prev,cauchy_increment_from_prev\n",
    );
    for (i, &n) in report.schedule.iter().enumerate() {
        let defect = if i == 0 { String::new() } else { format!("{}", report.monotonicity_defects[i - 1]) };
        let inc = if i == 0 { String::new() } else { format!("{}", report.cauchy_increments[i - 1]) };
        body.push_str(&format!(
            "{n},{},{},{defect},{inc}\n",
            report.measure_masses[i], report.limit_complementarity[i]
        ));
    }
    let outputs = vec![write_csv(out_dir, "sweep.csv", &body)?];

    let mut summary = RunSummary {
        command: "sweep".into(),
        checks,
        diagnostics: serde_json::json!({
            "flagged_pairs": report.flagged,
            "monotonicity_tolerance": tol,
        }),
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let manifest = write_manifest(out_dir, config_hash, &summary)?;
    summary.outputs.push(manifest);
    Ok(summary)
}

/// Runs the enabled verification checks (BDSDE residual, Skorokhod trend,
/// optionally the energy identity) and writes their tables.
pub fn cmd_verify(cfg: &RunConfig, config_hash: &str, out_dir: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let problem = instance(cfg)?;
    let noise = backward_noise(cfg, &problem)?;
    let grid = &problem.grid;
    let batch = ForwardPathBatch::new(grid, cfg.seeds.paths, cfg.monte_carlo.paths)?;

    let mut checks = Vec::new();
    let mut outputs = Vec::new();
    let mut diagnostics = serde_json::Map::new();
    if cfg.checks.hypotheses {
        checks.push(hypothesis_check(cfg, &problem)?);
    }

    // obstacle path-continuity diagnostic (not a gate): largest single-step
    // jump of v(t, W_t) along a small pilot batch
    {
        let pilot = ForwardPathBatch::new(grid, cfg.seeds.paths.wrapping_add(1), 64)?;
        let mut worst: f64 = 0.0;
        for m in 0..pilot.m_paths {
            let path = pilot.realize(m);
            let mut prev: Option<f64> = None;
            for k in 0..=grid.nt {
                let pos = path.position(k, grid.dim);
                if !grid.in_domain(pos) {
                    break;
                }
                let s = ospde::verify::interp_scalar(grid, problem.v.slice(k), pos);
                if let Some(p) = prev {
                    worst = worst.max((s - p).abs());
                }
                prev = Some(s);
            }
        }
        diagnostics.insert(
            "obstacle_continuity_max_step".into(),
            serde_json::json!(worst),
        );
    }

    let mut sols = Vec::new();
    if cfg.checks.skorokhod || cfg.checks.bsde_residual {
        let tol = if has_noise_coefficient(&problem) {
            cfg.tolerances.monotonicity_stochastic
        } else {
            cfg.tolerances.monotonicity_deterministic
        };
        let (s, _) = penalization_sweep(&problem, &cfg.schedule, &noise, tol)?;
        sols = s;
    }

    if cfg.checks.bsde_residual {
        let last = sols.last().expect("schedule validated nonempty");
        let stats = verify_bsde_residual(
            last,
            &problem,
            &batch,
            &noise,
            cfg.tolerances.residual_allowance_c,
        )?;
        let s0 = &stats.per_slice[0];
        checks.push(CheckOutcome::new(
            "bsde_residual_mean_t0",
            s0.mean,
            3.0 * s0.stderr + stats.allowance,
            stats.pass,
        ));
        diagnostics.insert(
            "residual_exclusion_fraction".into(),
            serde_json::json!(stats.exclusion_fraction),
        );
        let mut body = String::from("k,t,mean,stderr,max_abs\n");
        for (k, s) in stats.per_slice.iter().enumerate() {
            body.push_str(&format!("{k},{},{},{},{}\n", s.t, s.mean, s.stderr, s.max_abs));
        }
        outputs.push(write_csv(out_dir, "residual.csv", &body)?);
    }

    if cfg.checks.skorokhod {
        let report = verify_skorokhod(&sols, &problem, &batch)?;
        checks.push(CheckOutcome::new(
            "skorokhod_trend_inversions",
            (report.inversions_sup + report.inversions_defect) as f64,
            2.0,
            report.pass,
        ));
        let mut body = String::from("level,sup_neg_sq,reflection_defect\n");
        for i in 0..report.levels.len() {
            body.push_str(&format!(
                "{},{},{}\n",
                report.levels[i], report.sup_neg_sq[i], report.reflection_defect[i]
            ));
        }
        outputs.push(write_csv(out_dir, "skorokhod.csv", &body)?);
    }

    if cfg.checks.energy_identity {
        let coeffs = &problem.coeffs;
        let f_field = SpaceTimeField::from_fn(grid, |k, i| {
            let p = grid.position(i);
            let z = vec![0.0; grid.dim];
            coeffs.eval_f(grid.t(k), &p[..grid.dim], 0.0, &z)
        });
        let energy_batch =
            ForwardPathBatch::new(grid, cfg.seeds.paths.wrapping_add(2), cfg.monte_carlo.energy_paths)?;
        let report = verify_energy_identity(
            &f_field,
            grid,
            &energy_batch,
            &[0, grid.nt / 2],
            cfg.tolerances.energy_allowance_c,
        )?;
        for e in &report.entries {
            checks.push(CheckOutcome::new(
                format!("energy_identity_t{}", e.t_index),
                (e.lhs - e.rhs).abs(),
                3.0 * e.stderr,
                e.pass,
            ));
        }
        for c in &report.measure_checks {
            checks.push(CheckOutcome::new(
                format!("measure_representation_{}", c.name),
                (c.mc_value - c.grid_value).abs(),
                3.0 * c.stderr,
                c.pass,
            ));
        }
        let mut body = String::from("t_index,lhs,rhs,stderr\n");
        for e in &report.entries {
            body.push_str(&format!("{},{},{},{}\n", e.t_index, e.lhs, e.rhs, e.stderr));
        }
        body.push_str("test_function,mc,grid,stderr\n");
        for c in &report.measure_checks {
            body.push_str(&format!("{},{},{},{}\n", c.name, c.mc_value, c.grid_value, c.stderr));
        }
        outputs.push(write_csv(out_dir, "energy.csv", &body)?);
    }

    let mut summary = RunSummary {
        command: "verify".into(),
        checks,
        diagnostics: serde_json::Value::Object(diagnostics),
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let manifest = write_manifest(out_dir, config_hash, &summary)?;
    summary.outputs.push(manifest);
    Ok(summary)
}

/// Runs the technical-lemma suite: calculus inequalities on random
/// piecewise-linear profiles, gradient-decay fits (plain, divergence and
/// backward-noise variants), obstacle smoothing, and the convex-combination
/// construction on an oscillating sequence.
pub fn cmd_lemmas(cfg: &RunConfig, config_hash: &str, out_dir: &Path) -> Result<RunSummary> {
    use rand::{Rng, SeedableRng};
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let problem = instance(cfg)?;
    let grid = &problem.grid;
    let mut checks = Vec::new();
    let mut outputs = Vec::new();

    // calculus lemma property run
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seeds.probes);
    let mut violations = 0usize;
    let mut worst_margin = f64::INFINITY;
    for _ in 0..cfg.lemmas.calculus_cases {
        let m = rng.gen_range(8..100);
        let dt = 1.0 / m as f64;
        let phi: Vec<f64> = (0..=m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lambda = 10f64.powf(rng.gen_range(-0.5..2.5));
        let window = rng.gen_range(1..m);
        let delta = window as f64 * dt;
        let out = lemma_calculus(&phi, dt, lambda, delta)?;
        worst_margin = worst_margin.min(out.margin_first.min(out.margin_second));
        if !out.pass {
            violations += 1;
        }
    }
    checks.push(CheckOutcome::new(
        "calculus_lemma_violations",
        violations as f64,
        0.0,
        violations == 0,
    ));

    // gradient decay: plain, divergence and stochastic variants
    let density = cfg.lemmas.density.materialize(grid);
    let plain = lemma_gradient_decay(
        GradientDecaySource::Plain(&density),
        grid,
        &cfg.lemmas.gradient_schedule,
    )?;
    checks.push(CheckOutcome::new(
        "gradient_decay_constant_spread",
        plain.constant_spread.unwrap_or(f64::INFINITY),
        ospde::verify::GRADIENT_DECAY_MAX_SPREAD,
        plain.pass,
    ));
    let primitive = primitive_along_x(grid, &density);
    let divergence = lemma_gradient_decay(
        GradientDecaySource::Divergence(&primitive),
        grid,
        &cfg.lemmas.gradient_schedule,
    )?;
    checks.push(CheckOutcome::new(
        "gradient_decay_div_monotone",
        if divergence.decreasing { 0.0 } else { 1.0 },
        0.0,
        divergence.pass,
    ));
    let hnoise = sample_backward_noise(cfg.seeds.noise, grid.nt, 1, grid.dt())?;
    let stochastic = lemma_gradient_decay(
        GradientDecaySource::Stochastic { h: &density, noise: &hnoise },
        grid,
        &cfg.lemmas.gradient_schedule,
    )?;
    checks.push(CheckOutcome::new(
        "gradient_decay_noise_monotone",
        if stochastic.decreasing { 0.0 } else { 1.0 },
        0.0,
        stochastic.pass,
    ));
    let mut body = String::from("variant,rate,gradient_integral,bracket,ratio\n");
    for (i, &r) in plain.rates.iter().enumerate() {
        body.push_str(&format!(
            "plain,{r},{},{},{}\n",
            plain.gradient_integrals[i],
            plain.brackets.as_ref().unwrap()[i],
            plain.ratios.as_ref().unwrap()[i]
        ));
    }
    for (i, &r) in divergence.rates.iter().enumerate() {
        body.push_str(&format!("divergence,{r},{},,\n", divergence.gradient_integrals[i]));
    }
    for (i, &r) in stochastic.rates.iter().enumerate() {
        body.push_str(&format!("stochastic,{r},{},,\n", stochastic.gradient_integrals[i]));
    }
    outputs.push(write_csv(out_dir, "gradient_decay.csv", &body)?);

    // obstacle smoothing
    let batch = ForwardPathBatch::new(grid, cfg.seeds.paths, cfg.monte_carlo.paths)?;
    let smoothing = lemma_obstacle_smoothing(
        &problem,
        &batch,
        &cfg.lemmas.smoothing_schedule,
        cfg.lemmas.smoothing_delta,
    )?;
    checks.push(CheckOutcome::new(
        "obstacle_smoothing_domination",
        smoothing.domination_fraction,
        1.0,
        smoothing.pass,
    ));
    let mut body = String::from("rate,mean_sup_sq\n");
    for (i, &r) in smoothing.rates.iter().enumerate() {
        body.push_str(&format!("{r},{}\n", smoothing.mean_sup_sq[i]));
    }
    outputs.push(write_csv(out_dir, "obstacle_smoothing.csv", &body)?);

    // Mazur combination on the canonical oscillating instance
    let dim = 32;
    let mut mrng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seeds.probes.wrapping_add(1));
    let e: Vec<f64> = (0..dim).map(|_| mrng.gen_range(-1.0..1.0)).collect();
    let vectors: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let scale = 0.5f64.powi(i as i32);
            (0..dim).map(|j| sign * e[j] + scale * ((i + j) as f64 * 0.41).sin()).collect()
        })
        .collect();
    let mazur = mazur_combine(&vectors, &vec![0.0; dim])?;
    checks.push(CheckOutcome::new(
        "mazur_distance_ratio",
        mazur.distance / mazur.best_single_distance.max(f64::MIN_POSITIVE),
        0.1,
        mazur.distance <= 0.1 * mazur.best_single_distance,
    ));

    let mut summary = RunSummary {
        command: "lemmas".into(),
        checks,
        diagnostics: serde_json::json!({
            "calculus_worst_margin": worst_margin,
            "smoothing_exclusion_fraction": smoothing.exclusion_fraction,
            "mazur_weights": mazur.weights,
        }),
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let manifest = write_manifest(out_dir, config_hash, &summary)?;
    summary.outputs.push(manifest);
    Ok(summary)
}

/// Compares the penalized solutions along the schedule against the PSOR
/// oracle and writes the sup-distance table.
pub fn cmd_oracle(cfg: &RunConfig, config_hash: &str, out_dir: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let problem = instance(cfg)?;
    let noise = backward_noise(cfg, &problem)?;
    let rows = oracle_comparison(&problem, &cfg.schedule, &noise)?;

    let decreasing = rows.windows(2).all(|w| w[1].sup_distance_core < w[0].sup_distance_core);
    let last = rows.last().expect("schedule nonempty").sup_distance_core;
    let mut checks = Vec::new();
    checks.push(CheckOutcome::new(
        "oracle_distance_decreasing",
        if decreasing { 0.0 } else { 1.0 },
        0.0,
        decreasing,
    ));
    checks.push(CheckOutcome::new(
        "oracle_distance_final",
        last,
        cfg.tolerances.oracle_sup_distance,
        last <= cfg.tolerances.oracle_sup_distance,
    ));

    let mut body = String::from("level,sup_distance_core\n");
    for r in &rows {
        body.push_str(&format!("{},{}\n", r.level, r.sup_distance_core));
    }
    let outputs = vec![write_csv(out_dir, "oracle.csv", &body)?];

    let mut summary = RunSummary {
        command: "oracle".into(),
        checks,
        diagnostics: serde_json::json!({}),
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let manifest = write_manifest(out_dir, config_hash, &summary)?;
    summary.outputs.push(manifest);
    Ok(summary)
}
