//! Linearized explicit time stepping with energy and dissipation accounting.
//!
//! A step assembles `K` and `b` at `y^{k-1}`, solves for the velocity `z`
//! (zero on the Dirichlet boundary) and sets `y^k = y^{k-1} + tau z`.
//! The ledger records the stored energy, the work of the external loads and
//! two dissipation increments per step:
//!
//! * quadratic: `int D^2(grad y^k, grad y^{k-1}) / tau`, which approximates the
//!   dissipated work `tau * int 2R` of the step and converges to the energy drop;
//! * first power: `int D(grad y^k, grad y^{k-1})`, which scales like `tau`
//!   per step and therefore does not.

use std::collections::BTreeSet;
use std::io::{self, Write};

use thiserror::Error;

use crate::assembly::{
    self, assemble_mass, assemble_rhs, assemble_stiffness, Assembler, AssemblyError, DirichletReduction, LoadSpec,
};
use crate::fem::{DeformationField, FeSpace};
use crate::linsolve::{LinsolveError, ShiftedSpdSolver, SolveReport, SolverConfig};
use crate::material::{MaterialError, MaterialParams};
use crate::mesh::Mesh;
use crate::sparse::{dot, CsrMatrix};

/// Exact header of the ledger CSV.
pub const LEDGER_HEADER: &str =
    "step,time,elastic_energy,external_work_cum,diss_inc_quad,diss_cum_quad,diss_cum_printed,balance_rel_err";

/// Relative tolerance on `T / tau` being an integer.
pub const STEP_COUNT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StepError {
    #[error("time step must be positive and finite, got {0}")]
    InvalidTimeStep(f64),
    #[error("final time {t_final} is not an integer multiple of the time step {tau}")]
    NonIntegerStepCount { t_final: f64, tau: f64 },
    #[error("initial deformation is not admissible: {0}")]
    InadmissibleInitial(#[source] AssemblyError),
    #[error("setup failed: {0}")]
    Setup(#[source] AssemblyError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error("invalid solver configuration: {0}")]
    SolverConfig(#[source] LinsolveError),
    #[error("step {step}: assembly failed: {source}")]
    Assembly { step: usize, source: AssemblyError },
    #[error("step {step}: linear solve failed: {source}")]
    Solver { step: usize, source: LinsolveError },
    #[error("step {step}: velocity is not finite")]
    NonFiniteVelocity { step: usize },
    #[error(
        "step {step} rejected: det grad y = {det:e} at tetrahedron {tet}, quadrature point {point}; retry with tau = {suggested_tau}"
    )]
    Inverted { step: usize, tet: usize, point: usize, det: f64, suggested_tau: f64 },
    #[error("step {step}: run aborted by observer: {message}")]
    Aborted { step: usize, message: String },
}

/// Errors of the post-processing diagnostics.
#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticError {
    #[error("no dissipation along the trajectory; the relative balance error is undefined")]
    NoDissipation,
    #[error("the energy-dissipation error requires a run without external loads")]
    ExternalLoads,
    #[error("the ledger is empty")]
    EmptyLedger,
    #[error("slope fit needs at least two points with distinct step sizes, got {0}")]
    TooFewPoints(usize),
    #[error("slope fit needs positive values, got ({0}, {1})")]
    NonPositive(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub y: DeformationField,
    pub time: f64,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    /// Velocity `z` on all dofs.
    pub velocity: Vec<f64>,
    pub solve: SolveReport,
    pub elastic_before: f64,
    pub elastic_after: f64,
    /// `l . (y^k - y^{k-1})`.
    pub external_work_inc: f64,
    /// `int D^2(grad y^k, grad y^{k-1}) / tau`.
    pub diss_inc_quad: f64,
    /// `int D(grad y^k, grad y^{k-1})`.
    pub diss_inc_printed: f64,
    /// Smallest `det grad y^k` over all quadrature points.
    pub min_det: f64,
}

/// Number of steps `round(T / tau)`, requiring `T / tau` to be an integer.
pub fn step_count(t_final: f64, tau: f64) -> Result<usize, StepError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(StepError::InvalidTimeStep(tau));
    }
    let ratio = t_final / tau;
    let n = ratio.round();
    if !(t_final.is_finite() && n >= 1.0 && (ratio - n).abs() <= STEP_COUNT_TOLERANCE * n) {
        return Err(StepError::NonIntegerStepCount { t_final, tau });
    }
    Ok(n as usize)
}

/// The discrete problem with everything that stays fixed along a trajectory.
#[derive(Debug)]
pub struct Simulation {
    pub space: FeSpace,
    pub assembler: Assembler,
    pub params: MaterialParams,
    pub loads: LoadSpec,
    pub constrained: BTreeSet<usize>,
    reduction: DirichletReduction,
    mass: CsrMatrix,
    load: Vec<f64>,
    solver: ShiftedSpdSolver,
    warm_start: Option<Vec<f64>>,
}

impl Simulation {
    pub fn new(mesh: Mesh, params: MaterialParams, loads: LoadSpec, solver: SolverConfig) -> Result<Self, StepError> {
        let setup = StepError::Setup;
        params.validate()?;
        loads.validate(&mesh).map_err(setup)?;
        let solver = ShiftedSpdSolver::new(solver).map_err(StepError::SolverConfig)?;
        let space = FeSpace::new(mesh).map_err(|e| setup(e.into()))?;
        let assembler = Assembler::new(&space);
        let constrained = loads.constrained_dofs(&space.mesh).map_err(setup)?;
        let reduction = DirichletReduction::new(assembler.pattern.clone(), &constrained).map_err(setup)?;
        let mass = reduction.reduce_matrix(&assemble_mass(&assembler, &space).map_err(setup)?);
        let load = assembly::load_vector(&space, &loads);
        Ok(Self { space, assembler, params, loads, constrained, reduction, mass, load, solver, warm_start: None })
    }

    pub fn n_dofs(&self) -> usize {
        self.space.n_dofs()
    }

    pub fn mesh(&self) -> &Mesh {
        &self.space.mesh
    }

    /// State at time zero: `y0` with the Dirichlet placements imposed.
    pub fn initial_state(&self, mut y0: DeformationField) -> Result<SimulationState, StepError> {
        self.loads.impose_dirichlet(&self.space.mesh, &mut y0).map_err(StepError::InadmissibleInitial)?;
        self.space.check_field(&y0).map_err(|e| StepError::InadmissibleInitial(e.into()))?;
        let (det, tet, point) = assembly::min_jacobian(&self.space, &y0);
        if !(det > 0.0) {
            return Err(StepError::InadmissibleInitial(AssemblyError::NonInvertibleGradient { tet, point, det }));
        }
        Ok(SimulationState { y: y0, time: 0.0, step_index: 0 })
    }

    pub fn elastic_energy(&self, y: &DeformationField) -> f64 {
        assembly::elastic_energy(&self.space, y, &self.params)
    }

    /// `l . y`, the work functional of the external loads.
    pub fn load_functional(&self, y: &DeformationField) -> f64 {
        dot(&self.load, &y.dofs)
    }

    /// Velocity minimizing the linearized power functional at `y`.
    pub fn velocity(&mut self, y: &DeformationField, step: usize) -> Result<(Vec<f64>, SolveReport), StepError> {
        let wrap = |source| StepError::Assembly { step, source };
        let k = assemble_stiffness(&self.assembler, &self.space, y, &self.params).map_err(wrap)?;
        let b = assemble_rhs(&self.assembler, &self.space, y, &self.params, &self.loads).map_err(wrap)?;
        let k = self.reduction.reduce_matrix(&k);
        let b = self.reduction.reduce_vector(&b);
        let x0 = self.warm_start.as_deref().filter(|x| x.len() == b.len());
        let (z, report) =
            self.solver.solve(&k, &self.mass, &b, x0).map_err(|source| StepError::Solver { step, source })?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(StepError::NonFiniteVelocity { step });
        }
        let full = self.reduction.extend(&z);
        self.warm_start = Some(z);
        Ok((full, report))
    }

    /// One forward Euler step with the minimizing velocity.
    pub fn step(&mut self, state: &SimulationState, tau: f64) -> Result<(SimulationState, StepReport), StepError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(StepError::InvalidTimeStep(tau));
        }
        let step = state.step_index + 1;
        let (velocity, solve) = self.velocity(&state.y, step)?;
        let y = state.y.advanced(tau, &velocity);
        let (min_det, tet, point) = assembly::min_jacobian(&self.space, &y);
        if !(min_det > 0.0) {
            self.warm_start = None;
            return Err(StepError::Inverted { step, tet, point, det: min_det, suggested_tau: 0.5 * tau });
        }
        let (diss_sq, diss_printed) = assembly::dissipation_integrals(&self.space, &y, &state.y, &self.params);
        let report = StepReport {
            step,
            time: state.time + tau,
            external_work_inc: tau * dot(&self.load, &velocity),
            velocity,
            solve,
            elastic_before: self.elastic_energy(&state.y),
            elastic_after: self.elastic_energy(&y),
            diss_inc_quad: diss_sq / tau,
            diss_inc_printed: diss_printed,
            min_det,
        };
        let next = SimulationState { y, time: report.time, step_index: step };
        Ok((next, report))
    }

    /// Runs `round(T / tau)` steps from `y0`. `observer` sees every accepted
    /// step; its error aborts the run.
    pub fn run<O>(
        &mut self,
        y0: DeformationField,
        tau: f64,
        t_final: f64,
        mut observer: O,
    ) -> Result<(SimulationState, EnergyLedger), StepError>
    where
        O: FnMut(&SimulationState, &StepReport) -> Result<(), StepError>,
    {
        let steps = step_count(t_final, tau)?;
        let mut state = self.initial_state(y0)?;
        let mut ledger = EnergyLedger::new(
            self.elastic_energy(&state.y),
            self.load_functional(&state.y),
            self.loads.has_external_loads(),
        );
        self.warm_start = None;
        for k in 1..=steps {
            let (mut next, report) = self.step(&state, tau)?;
            // exact multiples of tau avoid drift in the logged times
            next.time = k as f64 * tau;
            ledger.record(k, next.time, &report);
            observer(&next, &report)?;
            state = next;
        }
        Ok((state, ledger))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerRow {
    pub step: usize,
    pub time: f64,
    pub elastic_energy: f64,
    pub external_work_inc: f64,
    pub external_work_cum: f64,
    pub diss_inc_quad: f64,
    pub diss_cum_quad: f64,
    pub diss_inc_printed: f64,
    pub diss_cum_printed: f64,
    pub balance_rel_err: f64,
}

/// Per-step energy bookkeeping of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    pub initial_elastic_energy: f64,
    pub initial_load_functional: f64,
    pub external_loads: bool,
    pub rows: Vec<LedgerRow>,
}

/// `|W0 - W + work - diss| / diss`, zero for a trajectory at rest.
fn balance_error(w0: f64, w: f64, work: f64, diss: f64) -> f64 {
    let residual = (w0 - w + work - diss).abs();
    if diss > 0.0 {
        residual / diss
    } else if residual == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

impl EnergyLedger {
    pub fn new(initial_elastic_energy: f64, initial_load_functional: f64, external_loads: bool) -> Self {
        Self { initial_elastic_energy, initial_load_functional, external_loads, rows: Vec::new() }
    }

    pub fn record(&mut self, step: usize, time: f64, report: &StepReport) {
        let last = self.rows.last();
        let external_work_cum = last.map_or(0.0, |r| r.external_work_cum) + report.external_work_inc;
        let diss_cum_quad = last.map_or(0.0, |r| r.diss_cum_quad) + report.diss_inc_quad;
        let diss_cum_printed = last.map_or(0.0, |r| r.diss_cum_printed) + report.diss_inc_printed;
        self.rows.push(LedgerRow {
            step,
            time,
            elastic_energy: report.elastic_after,
            external_work_inc: report.external_work_inc,
            external_work_cum,
            diss_inc_quad: report.diss_inc_quad,
            diss_cum_quad,
            diss_inc_printed: report.diss_inc_printed,
            diss_cum_printed,
            balance_rel_err: balance_error(
                self.initial_elastic_energy,
                report.elastic_after,
                external_work_cum,
                diss_cum_quad,
            ),
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&LedgerRow> {
        self.rows.last()
    }

    pub fn final_elastic_energy(&self) -> f64 {
        self.last().map_or(self.initial_elastic_energy, |r| r.elastic_energy)
    }

    pub fn cumulative_dissipation_quad(&self) -> f64 {
        self.last().map_or(0.0, |r| r.diss_cum_quad)
    }

    pub fn cumulative_dissipation_printed(&self) -> f64 {
        self.last().map_or(0.0, |r| r.diss_cum_printed)
    }

    pub fn cumulative_external_work(&self) -> f64 {
        self.last().map_or(0.0, |r| r.external_work_cum)
    }

    /// Largest running balance error over all steps.
    pub fn max_balance_error(&self) -> f64 {
        self.rows.iter().map(|r| r.balance_rel_err).fold(0.0, f64::max)
    }

    /// Steps whose stored energy exceeds that of the previous state.
    pub fn energy_increases(&self) -> Vec<usize> {
        let mut prev = self.initial_elastic_energy;
        let mut out = Vec::new();
        for r in &self.rows {
            if r.elastic_energy > prev {
                out.push(r.step);
            }
            prev = r.elastic_energy;
        }
        out
    }

    /// Checks that every cumulative column is the running sum of its increments.
    pub fn cumulative_sums_consistent(&self) -> bool {
        let (mut work, mut quad, mut printed) = (0.0, 0.0, 0.0);
        self.rows.iter().all(|r| {
            work += r.external_work_inc;
            quad += r.diss_inc_quad;
            printed += r.diss_inc_printed;
            work == r.external_work_cum && quad == r.diss_cum_quad && printed == r.diss_cum_printed
        })
    }

    /// CSV with [`LEDGER_HEADER`]; floats are written in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{LEDGER_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.time,
                r.elastic_energy,
                r.external_work_cum,
                r.diss_inc_quad,
                r.diss_cum_quad,
                r.diss_cum_printed,
                r.balance_rel_err
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Relative energy-dissipation errors `(e_quadratic, e_printed)`:
/// `|W(y0) - W(yK) - S| / S` with `S = sum D^2 / tau` and `S = sum D` respectively.
pub fn energy_dissipation_error(ledger: &EnergyLedger) -> Result<(f64, f64), DiagnosticError> {
    if ledger.external_loads {
        return Err(DiagnosticError::ExternalLoads);
    }
    let last = ledger.last().ok_or(DiagnosticError::EmptyLedger)?;
    if !(last.diss_cum_quad > 0.0 && last.diss_cum_printed > 0.0) {
        return Err(DiagnosticError::NoDissipation);
    }
    let drop = ledger.initial_elastic_energy - last.elastic_energy;
    Ok(((drop - last.diss_cum_quad).abs() / last.diss_cum_quad, (drop - last.diss_cum_printed).abs() / last.diss_cum_printed))
}

/// Least-squares slope of `log e` against `log tau`.
pub fn fit_convergence_slope(points: &[(f64, f64)]) -> Result<f64, DiagnosticError> {
    if let Some(&(t, e)) = points.iter().find(|(t, e)| !(*t > 0.0 && *e > 0.0 && t.is_finite() && e.is_finite())) {
        return Err(DiagnosticError::NonPositive(t, e));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if points.len() < 2 || sxx == 0.0 {
        return Err(DiagnosticError::TooFewPoints(points.len()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}
