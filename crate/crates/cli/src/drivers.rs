//! Experiment drivers: run a validated configuration and write its artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use kvsim::material::{self, MaterialParams};
use kvsim::mesh::build_box_mesh;
use kvsim::oracle::{self, TrajectoryProblem};
use kvsim::stepper::{self, EnergyLedger, Simulation, StepError};
use kvsim::vtk;
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConvergenceConfig, OracleCompareConfig, ScenarioConfig};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_json(path: &Path, value: &Value) -> Result<(), RunError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| io_err(path)(e.into()))?;
    writeln!(out).and_then(|_| out.flush()).map_err(io_err(path))
}

fn write_ledger(path: &Path, ledger: &EnergyLedger) -> Result<(), RunError> {
    let mut out = create(path)?;
    ledger.write_csv(&mut out).and_then(|_| out.flush()).map_err(io_err(path))
}

/// Totals of one simulation run, as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub steps: usize,
    pub tau: f64,
    pub t_final: f64,
    pub initial_elastic_energy: f64,
    pub final_elastic_energy: f64,
    pub cumulative_external_work: f64,
    pub cumulative_dissipation_quad: f64,
    pub cumulative_dissipation_printed: f64,
    pub max_balance_rel_err: f64,
    pub final_balance_rel_err: f64,
    /// Smallest deformed x3 coordinate over all nodes at the final time.
    pub final_min_height: f64,
    pub wall_time_s: f64,
}

/// Runs one scenario, writing `ledger.csv`, `summary.json` and, when
/// requested, `snapshots/step_NNNNNN.vtk` into `out_dir`.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: &Path, seed: u64) -> Result<SimulationSummary, RunError> {
    let started = Instant::now();
    let mesh = build_box_mesh(&cfg.mesh).map_err(|e| RunError::Setup(e.to_string()))?;
    let y0 = cfg.initial_condition.field(&mesh).map_err(RunError::Setup)?;
    let mut sim = Simulation::new(mesh, cfg.material, cfg.loads.clone(), cfg.solver)?;
    // reject inadmissible starts before anything is written
    sim.initial_state(y0.clone())?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let snapshots = out_dir.join("snapshots");
    if cfg.snapshot_every > 0 {
        fs::create_dir_all(&snapshots).map_err(io_err(&snapshots))?;
        let start = sim.initial_state(y0.clone())?;
        write_snapshot(&snapshots, &sim, &start.y, None, 0, 0.0)?;
    }
    let mut snapshot_error = None;
    let every = cfg.snapshot_every;
    let mesh_copy = sim.mesh().clone();
    let run = sim.run(y0, cfg.tau, cfg.t_final, |state, report| {
        if every > 0 && state.step_index % every == 0 {
            let path = snapshot_path(&snapshots, state.step_index);
            let result = File::create(&path).map(BufWriter::new).and_then(|mut f| {
                vtk::write_snapshot(&mut f, &mesh_copy, &state.y, Some(&report.velocity), state.step_index, state.time)?;
                f.flush()
            });
            if let Err(e) = result {
                let message = format!("cannot write {}: {e}", path.display());
                snapshot_error = Some(RunError::Io { path, source: e });
                return Err(StepError::Aborted { step: state.step_index, message });
            }
        }
        Ok(())
    });
    if let Some(e) = snapshot_error {
        return Err(e);
    }
    let (state, ledger) = run?;
    write_ledger(&out_dir.join("ledger.csv"), &ledger)?;
    let final_min_height = (0..state.y.node_count()).map(|n| state.y.node(n)[2]).fold(f64::INFINITY, f64::min);
    let summary = SimulationSummary {
        steps: ledger.len(),
        tau: cfg.tau,
        t_final: cfg.t_final,
        initial_elastic_energy: ledger.initial_elastic_energy,
        final_elastic_energy: ledger.final_elastic_energy(),
        cumulative_external_work: ledger.cumulative_external_work(),
        cumulative_dissipation_quad: ledger.cumulative_dissipation_quad(),
        cumulative_dissipation_printed: ledger.cumulative_dissipation_printed(),
        max_balance_rel_err: ledger.max_balance_error(),
        final_balance_rel_err: ledger.last().map_or(0.0, |r| r.balance_rel_err),
        final_min_height,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let mut value = serde_json::to_value(&summary).expect("plain data");
    value["seed"] = json!(seed);
    write_json(&out_dir.join("summary.json"), &value)?;
    Ok(summary)
}

fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.vtk"))
}

fn write_snapshot(
    dir: &Path,
    sim: &Simulation,
    y: &kvsim::fem::DeformationField,
    velocity: Option<&[f64]>,
    step: usize,
    time: f64,
) -> Result<(), RunError> {
    let path = snapshot_path(dir, step);
    let mut out = create(&path)?;
    vtk::write_snapshot(&mut out, sim.mesh(), y, velocity, step, time)
        .and_then(|_| out.flush())
        .map_err(io_err(&path))
}

/// One `(mesh, tau)` run of the convergence study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRun {
    pub resolution: usize,
    pub tau: f64,
    pub steps: usize,
    pub e_quadratic: Option<f64>,
    pub e_printed: Option<f64>,
    pub final_elastic_energy: f64,
    pub cumulative_dissipation_quad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeshSlope {
    pub resolution: usize,
    /// Log-log slope of `e_quadratic`; `None` when undefined (fewer than two
    /// usable step sizes).
    pub slope: Option<f64>,
    pub slope_printed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub runs: Vec<ConvergenceRun>,
    pub slope: Vec<MeshSlope>,
    pub wall_time_s: f64,
}

/// Header of `convergence.csv`.
pub const CONVERGENCE_HEADER: &str =
    "resolution,tau,steps,e_quadratic,e_printed,final_elastic_energy,cumulative_dissipation_quad";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| x.to_string())
}

/// Runs every `(resolution, tau)` pair and fits one slope per mesh. Writes
/// `convergence.csv`, `ledgers/n{n}_tau{tau}.csv` and `summary.json`.
pub fn run_convergence_study(cfg: &ConvergenceConfig, out_dir: &Path, seed: u64) -> Result<ConvergenceSummary, RunError> {
    let started = Instant::now();
    let ledgers = out_dir.join("ledgers");
    fs::create_dir_all(&ledgers).map_err(io_err(&ledgers))?;
    let mut runs = Vec::new();
    let mut slope = Vec::new();
    for &n in &cfg.resolutions {
        let mut points = Vec::new();
        let mut points_printed = Vec::new();
        for &tau in &cfg.taus {
            let run_cfg = cfg.run_config(n, tau);
            let mesh = build_box_mesh(&run_cfg.mesh).map_err(|e| RunError::Setup(e.to_string()))?;
            let y0 = run_cfg.initial_condition.field(&mesh).map_err(RunError::Setup)?;
            let mut sim = Simulation::new(mesh, run_cfg.material, run_cfg.loads.clone(), run_cfg.solver)?;
            let (_, ledger) = sim.run(y0, tau, run_cfg.t_final, |_, _| Ok(()))?;
            write_ledger(&ledgers.join(format!("n{n}_tau{tau}.csv")), &ledger)?;
            let errors = stepper::energy_dissipation_error(&ledger).ok();
            if let Some((eq, ep)) = errors {
                points.push((tau, eq));
                points_printed.push((tau, ep));
            }
            runs.push(ConvergenceRun {
                resolution: n,
                tau,
                steps: ledger.len(),
                e_quadratic: errors.map(|e| e.0),
                e_printed: errors.map(|e| e.1),
                final_elastic_energy: ledger.final_elastic_energy(),
                cumulative_dissipation_quad: ledger.cumulative_dissipation_quad(),
            });
        }
        slope.push(MeshSlope {
            resolution: n,
            slope: stepper::fit_convergence_slope(&points).ok(),
            slope_printed: stepper::fit_convergence_slope(&points_printed).ok(),
        });
    }
    let csv_path = out_dir.join("convergence.csv");
    let mut csv = create(&csv_path)?;
    let write = |csv: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(csv, "{CONVERGENCE_HEADER}")?;
        for r in &runs {
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.resolution,
                r.tau,
                r.steps,
                opt(r.e_quadratic),
                opt(r.e_printed),
                r.final_elastic_energy,
                r.cumulative_dissipation_quad
            )?;
        }
        csv.flush()
    };
    write(&mut csv).map_err(io_err(&csv_path))?;
    let summary = ConvergenceSummary { runs, slope, wall_time_s: started.elapsed().as_secs_f64() };
    let mut value = serde_json::to_value(&summary).expect("plain data");
    value["seed"] = json!(seed);
    write_json(&out_dir.join("summary.json"), &value)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSummary {
    /// Log-log slope of the L-infinity deviation over the successful rows.
    pub slope: Option<f64>,
    pub slope_l2: Option<f64>,
    pub failed_rows: Vec<f64>,
    /// Largest relative gap between the brute-force and closed-form minima
    /// of the pointwise power density over the random samples.
    pub pointwise_max_rel_error: Option<f64>,
    pub wall_time_s: f64,
}

/// Random deformation gradients with `det` in `[0.5, 2]`.
pub fn random_gradients(count: usize, seed: u64) -> Vec<Matrix3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let y = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.4..0.4));
        let det = y.determinant();
        if (0.5..=2.0).contains(&det) {
            out.push(y);
        }
    }
    out
}

/// Largest relative error of the brute-force minimum of `f_Y` against the
/// closed form over `count` random samples.
pub fn pointwise_check(p: &MaterialParams, count: usize, seed: u64) -> Result<Option<f64>, RunError> {
    let mut worst: Option<f64> = None;
    for (k, y) in random_gradients(count, seed).iter().enumerate() {
        let exact = material::power_density_minimum(y, p).map_err(oracle::OracleError::from)?;
        let (found, _) = oracle::brute_force_fy_min(y, p, seed.wrapping_add(k as u64))?;
        let rel = (found - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
        worst = Some(worst.map_or(rel, |w: f64| w.max(rel)));
    }
    Ok(worst)
}

/// Compares two schemes over the configured time steps. Writes
/// `comparison.csv` and `summary.json`; failing rows are marked and the
/// sweep continues.
pub fn run_oracle_comparison(cfg: &OracleCompareConfig, out_dir: &Path, seed: u64) -> Result<OracleSummary, RunError> {
    let started = Instant::now();
    let s = &cfg.scenario;
    let mesh = build_box_mesh(&s.mesh).map_err(|e| RunError::Setup(e.to_string()))?;
    let y0 = s.initial_condition.field(&mesh).map_err(RunError::Setup)?;
    let problem = TrajectoryProblem { mesh, params: s.material, loads: s.loads.clone(), solver: s.solver, newton: cfg.newton };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let rows = oracle::compare_schemes(&problem, &y0, s.t_final, &cfg.taus, cfg.scheme_a, cfg.scheme_b)?;
    let csv_path = out_dir.join("comparison.csv");
    let mut csv = create(&csv_path)?;
    oracle::write_comparison_csv(&rows, &mut csv).and_then(|_| csv.flush()).map_err(io_err(&csv_path))?;
    let ok: Vec<(f64, (f64, f64))> = rows.iter().filter_map(|r| r.deviation.map(|d| (r.tau, d))).collect();
    let fit = |pick: fn(&(f64, f64)) -> f64| {
        let pts: Vec<(f64, f64)> = ok.iter().map(|(t, d)| (*t, pick(d))).collect();
        stepper::fit_convergence_slope(&pts).ok()
    };
    let summary = OracleSummary {
        slope: fit(|d| d.0),
        slope_l2: fit(|d| d.1),
        failed_rows: rows.iter().filter(|r| r.deviation.is_none()).map(|r| r.tau).collect(),
        pointwise_max_rel_error: pointwise_check(&s.material, cfg.pointwise_samples, seed)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let mut value = serde_json::to_value(&summary).expect("plain data");
    value["seed"] = json!(seed);
    value["errors"] = json!(rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| json!({ "tau": r.tau, "error": e })))
        .collect::<Vec<_>>());
    write_json(&out_dir.join("summary.json"), &value)?;
    Ok(summary)
}
