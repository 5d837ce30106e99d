//! Independent reference solvers for validating the linearized scheme.
//!
//! * Linear Kelvin–Voigt viscoelasticity with the full-gradient forms
//!   `C G = 2 mu G + lambda tr(G) Id` and `D G = 2 c G`, stepped implicitly
//!   (`(A_C + A_D / tau) u^k = (A_D / tau) u^{k-1}`) or explicitly
//!   (`A_D v = -A_C u^{k-1}`, `u^k = u^{k-1} + tau v`), plus its scalar
//!   single-dof reduction with the exact exponential solution.
//! * The nonlinear implicit minimizing-movement step
//!   `min_y  int W(grad y) - l . y + (1/2tau) int D^2(grad y, grad y^{k-1})`,
//!   solved for a local minimizer near `y^{k-1}` by damped Newton.
//! * Brute-force minimization of the pointwise power density `f_Y`.

use std::collections::BTreeSet;
use std::io::{self, Write};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{self, assemble_mass, Assembler, AssemblyError, DirichletReduction, LoadSpec};
use crate::fem::{gradient_from_nodes, DeformationField, FemError, FeSpace};
use crate::linsolve::{shifted_operator, LinsolveError, SparseCholesky, SolverConfig};
use crate::material::{self, ddot, Mat3, MaterialError, MaterialParams};
use crate::mesh::Mesh;
use crate::sparse::{dot, norm, norm_inf, CsrMatrix};
use crate::stepper::{step_count, Simulation, StepError};

/// Exact header of the scheme comparison CSV.
pub const COMPARISON_HEADER: &str = "tau,scheme_a,scheme_b,linf_deviation,l2_deviation";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solver(#[from] LinsolveError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("line search failed at Newton iteration {iteration} (gradient norm {gradient_norm:e})")]
    LineSearch { iteration: usize, gradient_norm: f64 },
    #[error("Newton did not converge in {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
    #[error("no positive definite shift of the Hessian found")]
    NoDefiniteShift,
    #[error("brute-force minimization did not converge (gradient norm {0:e})")]
    BruteForce(f64),
    #[error("vectors of length {0} and {1} cannot be compared")]
    LengthMismatch(usize, usize),
}

impl From<FemError> for OracleError {
    fn from(e: FemError) -> Self {
        OracleError::Assembly(e.into())
    }
}

/// Isotropic elasticity and viscosity tensors of the linear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicTensors {
    pub mu: f64,
    pub lambda: f64,
    pub c: f64,
}

impl IsotropicTensors {
    pub fn new(mu: f64, lambda: f64, c: f64) -> Result<Self, OracleError> {
        let t = Self { mu, lambda, c };
        t.validate()?;
        Ok(t)
    }

    pub fn from_params(p: &MaterialParams) -> Self {
        Self { mu: p.mu, lambda: p.lambda, c: p.c }
    }

    /// Positive definiteness of both forms on full gradients.
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.mu > 0.0 && 2.0 * self.mu + 3.0 * self.lambda > 0.0 && self.c > 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(OracleError::InvalidParams(format!("{self:?}")))
        }
    }

    pub fn apply_elasticity(&self, g: &Mat3) -> Mat3 {
        2.0 * self.mu * g + self.lambda * g.trace() * Mat3::identity()
    }

    pub fn apply_viscosity(&self, g: &Mat3) -> Mat3 {
        2.0 * self.c * g
    }
}

/// Time discretization of the linear model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearScheme {
    Implicit,
    Explicit,
}

/// Scalar reduction `a u + d u' = 0` with exact solution `u0 exp(-a t / d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarModel {
    pub a: f64,
    pub d: f64,
}

impl ScalarModel {
    pub fn implicit_step(&self, u_prev: f64, tau: f64) -> f64 {
        u_prev * (self.d / tau) / (self.a + self.d / tau)
    }

    pub fn explicit_step(&self, u_prev: f64, tau: f64) -> f64 {
        u_prev * (1.0 - tau * self.a / self.d)
    }

    pub fn exact(&self, u0: f64, t: f64) -> f64 {
        u0 * (-self.a * t / self.d).exp()
    }

    pub fn trajectory_end(&self, u0: f64, tau: f64, t_final: f64, scheme: LinearScheme) -> Result<f64, OracleError> {
        let steps = step_count(t_final, tau)?;
        let mut u = u0;
        for _ in 0..steps {
            u = match scheme {
                LinearScheme::Implicit => self.implicit_step(u, tau),
                LinearScheme::Explicit => self.explicit_step(u, tau),
            };
        }
        Ok(u)
    }
}

/// Linear Kelvin–Voigt model on a P2 space with homogeneous Dirichlet
/// conditions on the constrained dofs.
#[derive(Debug)]
pub struct LinearKelvinVoigt {
    pub space: FeSpace,
    pub tensors: IsotropicTensors,
    /// Full (unreduced) mass matrix, for mesh-dependent L2 norms.
    pub mass: CsrMatrix,
    elastic: CsrMatrix,
    viscous: CsrMatrix,
    mass_reduced: CsrMatrix,
    reduction: DirichletReduction,
    shift_delta: f64,
    explicit_factor: Option<SparseCholesky>,
    implicit_factor: Option<(f64, SparseCholesky)>,
}

impl LinearKelvinVoigt {
    pub fn new(
        mesh: Mesh,
        tensors: IsotropicTensors,
        constrained: &BTreeSet<usize>,
        solver: &SolverConfig,
    ) -> Result<Self, OracleError> {
        tensors.validate()?;
        solver.validate()?;
        let space = FeSpace::new(mesh)?;
        let assembler = Assembler::new(&space);
        let t = tensors;
        let elastic = assembler.assemble_matrix(&space, true, |tet, block| {
            for q in 0..space.n_quad() {
                let g = space.grads(tet, q);
                let w = space.jxw(tet, q);
                for i in 0..10 {
                    for j in 0..10 {
                        let gg = g[i].dot(&g[j]);
                        for a in 0..3 {
                            block[3 * i + a][3 * j + a] += w * 2.0 * t.mu * gg;
                            for b in 0..3 {
                                block[3 * i + a][3 * j + b] += w * t.lambda * g[i][a] * g[j][b];
                            }
                        }
                    }
                }
            }
            Ok(())
        })?;
        let viscous = assembler.assemble_matrix(&space, true, |tet, block| {
            for q in 0..space.n_quad() {
                let g = space.grads(tet, q);
                let w = space.jxw(tet, q);
                for i in 0..10 {
                    for j in 0..10 {
                        let v = w * 2.0 * t.c * g[i].dot(&g[j]);
                        for a in 0..3 {
                            block[3 * i + a][3 * j + a] += v;
                        }
                    }
                }
            }
            Ok(())
        })?;
        let mass = assemble_mass(&assembler, &space)?;
        let reduction = DirichletReduction::new(assembler.pattern.clone(), constrained)?;
        Ok(Self {
            elastic: reduction.reduce_matrix(&elastic),
            viscous: reduction.reduce_matrix(&viscous),
            mass_reduced: reduction.reduce_matrix(&mass),
            mass,
            reduction,
            space,
            tensors,
            shift_delta: solver.shift_delta,
            explicit_factor: None,
            implicit_factor: None,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.space.n_dofs()
    }

    /// `(A_C + A_D / tau) u^k = (A_D / tau) u^{k-1}`, solved for the
    /// increment `u^k - u^{k-1}` so that the rigid-motion shift never acts
    /// on the state itself.
    pub fn implicit_step(&mut self, u_prev: &[f64], tau: f64) -> Result<Vec<f64>, OracleError> {
        check_tau(tau)?;
        let u = self.reduction.reduce_vector(u_prev);
        let rhs: Vec<f64> = self.elastic.matvec(&u).iter().map(|v| -v).collect();
        if !matches!(&self.implicit_factor, Some((t, _)) if *t == tau) {
            let op = self.elastic.add_scaled(1.0 / tau, &self.viscous);
            let (shifted, _) = shifted_operator(&op, &self.mass_reduced, self.shift_delta);
            self.implicit_factor = Some((tau, SparseCholesky::factor(&shifted)?));
        }
        let (_, chol) = self.implicit_factor.as_ref().expect("factor present");
        let w = chol.solve(&rhs);
        let next: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + b).collect();
        Ok(self.reduction.extend(&next))
    }

    /// `A_D v = -A_C u^{k-1}`, `u^k = u^{k-1} + tau v`.
    pub fn explicit_step(&mut self, u_prev: &[f64], tau: f64) -> Result<Vec<f64>, OracleError> {
        check_tau(tau)?;
        let u = self.reduction.reduce_vector(u_prev);
        let rhs: Vec<f64> = self.elastic.matvec(&u).iter().map(|v| -v).collect();
        if self.explicit_factor.is_none() {
            let (shifted, _) = shifted_operator(&self.viscous, &self.mass_reduced, self.shift_delta);
            self.explicit_factor = Some(SparseCholesky::factor(&shifted)?);
        }
        let v = self.explicit_factor.as_ref().expect("factor present").solve(&rhs);
        let next: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + tau * b).collect();
        Ok(self.reduction.extend(&next))
    }

    /// Final state after `round(T / tau)` steps; constrained entries of `u0`
    /// are set to zero.
    pub fn run(&mut self, u0: &[f64], tau: f64, t_final: f64, scheme: LinearScheme) -> Result<Vec<f64>, OracleError> {
        let steps = step_count(t_final, tau)?;
        let mut u = self.reduction.extend(&self.reduction.reduce_vector(u0));
        for _ in 0..steps {
            u = match scheme {
                LinearScheme::Implicit => self.implicit_step(&u, tau)?,
                LinearScheme::Explicit => self.explicit_step(&u, tau)?,
            };
        }
        Ok(u)
    }

    /// `sqrt(u^T M u)`.
    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        self.mass.quadratic_form(u).max(0.0).sqrt()
    }
}

fn check_tau(tau: f64) -> Result<(), OracleError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(StepError::InvalidTimeStep(tau).into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    pub max_iterations: usize,
    /// Converged when `|grad| <= gradient_atol + gradient_rtol |grad_0|`.
    pub gradient_rtol: f64,
    pub gradient_atol: f64,
    /// Step length reduction factor of the backtracking line search.
    pub backtracking: f64,
    /// Sufficient decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_rtol: 1e-10,
            gradient_atol: 1e-9,
            backtracking: 0.5,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        let ok = self.max_iterations > 0
            && self.gradient_rtol >= 0.0
            && self.gradient_atol >= 0.0
            && self.gradient_rtol + self.gradient_atol > 0.0
            && self.backtracking > 0.0
            && self.backtracking < 1.0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.max_backtracks > 0;
        if ok {
            Ok(())
        } else {
            Err(OracleError::InvalidParams(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NewtonReport {
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Largest Hessian shift used, relative to `max diag`.
    pub max_shift: f64,
}

/// The nonlinear implicit minimizing-movement scheme.
#[derive(Debug)]
pub struct NonlinearImplicit {
    pub space: FeSpace,
    pub params: MaterialParams,
    pub loads: LoadSpec,
    pub newton: NewtonConfig,
    assembler: Assembler,
    reduction: DirichletReduction,
    mass: CsrMatrix,
    load: Vec<f64>,
    shift_delta: f64,
}

impl NonlinearImplicit {
    pub fn new(
        mesh: Mesh,
        params: MaterialParams,
        loads: LoadSpec,
        newton: NewtonConfig,
        solver: &SolverConfig,
    ) -> Result<Self, OracleError> {
        params.validate()?;
        newton.validate()?;
        solver.validate()?;
        loads.validate(&mesh)?;
        let space = FeSpace::new(mesh)?;
        let assembler = Assembler::new(&space);
        let constrained = loads.constrained_dofs(&space.mesh)?;
        let reduction = DirichletReduction::new(assembler.pattern.clone(), &constrained)?;
        let mass = reduction.reduce_matrix(&assemble_mass(&assembler, &space)?);
        let load = assembly::load_vector(&space, &loads);
        Ok(Self { space, params, loads, newton, assembler, reduction, mass, load, shift_delta: solver.shift_delta })
    }

    /// `int W(grad y) - l . y + (1/2tau) int D^2(grad y, grad y_prev)`;
    /// infinite when `y` inverts an element.
    pub fn increment_functional(&self, y: &DeformationField, y_prev: &DeformationField, tau: f64) -> f64 {
        let elastic = assembly::elastic_energy(&self.space, y, &self.params);
        if !elastic.is_finite() {
            return f64::INFINITY;
        }
        let (d2, _) = assembly::dissipation_integrals(&self.space, y, y_prev, &self.params);
        elastic - dot(&self.load, &y.dofs) + d2 / (2.0 * tau)
    }

    /// Gradient of the increment functional on all dofs.
    pub fn gradient(&self, y: &DeformationField, y_prev: &DeformationField, tau: f64) -> Result<Vec<f64>, OracleError> {
        let p = self.params;
        let space = &self.space;
        let mut g = self.assembler.assemble_vector(space, |tet, block| {
            let v = space.local_values(y, tet);
            let v0 = space.local_values(y_prev, tet);
            for q in 0..space.n_quad() {
                let grads = space.grads(tet, q);
                let f = gradient_from_nodes(&v, grads);
                let f0 = gradient_from_nodes(&v0, grads);
                let e = f.transpose() * f - f0.transpose() * f0;
                let stress = material::stress_pk1(&f, &p).map_err(|_| AssemblyError::NonInvertibleGradient {
                    tet,
                    point: q,
                    det: f.determinant(),
                })? + (2.0 * p.c / tau) * f * e;
                let w = space.jxw(tet, q);
                for i in 0..10 {
                    let s = stress * grads[i];
                    for a in 0..3 {
                        block[3 * i + a] += w * s[a];
                    }
                }
            }
            Ok(())
        })?;
        for (gi, li) in g.iter_mut().zip(&self.load) {
            *gi -= li;
        }
        Ok(g)
    }

    /// Hessian of the increment functional on all dofs.
    pub fn hessian(&self, y: &DeformationField, y_prev: &DeformationField, tau: f64) -> Result<CsrMatrix, OracleError> {
        let p = self.params;
        let space = &self.space;
        Ok(self.assembler.assemble_matrix(space, true, |tet, block| {
            let v = space.local_values(y, tet);
            let v0 = space.local_values(y_prev, tet);
            for q in 0..space.n_quad() {
                let grads = space.grads(tet, q);
                let f = gradient_from_nodes(&v, grads);
                let f0 = gradient_from_nodes(&v0, grads);
                let e = f.transpose() * f - f0.transpose() * f0;
                let w = space.jxw(tet, q);
                let k = 2.0 * p.c / tau;
                for j in 0..10 {
                    for b in 0..3 {
                        let mut h = Matrix3::zeros();
                        h.set_row(b, &grads[j].transpose());
                        let t = material::stress_pk1_derivative(&f, &h, &p).map_err(|_| {
                            AssemblyError::NonInvertibleGradient { tet, point: q, det: f.determinant() }
                        })? + k * (h * e + f * (h.transpose() * f + f.transpose() * h));
                        for i in 0..10 {
                            let s = t * grads[i];
                            for a in 0..3 {
                                block[3 * i + a][3 * j + b] += w * s[a];
                            }
                        }
                    }
                }
            }
            Ok(())
        })?)
    }

    /// One implicit step: a local minimizer of the increment functional
    /// found by damped Newton started at `y_prev`.
    pub fn step(&self, y_prev: &DeformationField, tau: f64) -> Result<(DeformationField, NewtonReport), OracleError> {
        check_tau(tau)?;
        let cfg = &self.newton;
        let mut y = y_prev.clone();
        let mut phi = self.increment_functional(&y, y_prev, tau);
        if !phi.is_finite() {
            return Err(OracleError::Assembly(AssemblyError::NonInvertibleGradient {
                tet: 0,
                point: 0,
                det: assembly::min_jacobian(&self.space, y_prev).0,
            }));
        }
        let mut report = NewtonReport::default();
        let mut grad = self.reduction.reduce_vector(&self.gradient(&y, y_prev, tau)?);
        let threshold = cfg.gradient_atol + cfg.gradient_rtol * norm(&grad);
        for iteration in 0..=cfg.max_iterations {
            report.gradient_norm = norm(&grad);
            report.iterations = iteration;
            if report.gradient_norm <= threshold {
                return Ok((y, report));
            }
            if iteration == cfg.max_iterations {
                break;
            }
            let hess = self.reduction.reduce_matrix(&self.hessian(&y, y_prev, tau)?);
            let (chol, shift) = self.factor_with_shift(&hess)?;
            report.max_shift = report.max_shift.max(shift);
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            let dir = self.reduction.extend(&chol.solve(&neg));
            let slope = dot(&self.reduction.reduce_vector(&dir), &grad);
            // rounding slack for the last iterations, where phi stagnates
            let slack = 64.0 * f64::EPSILON * phi.abs();
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..cfg.max_backtracks {
                let trial = y.advanced(alpha, &dir);
                let phi_trial = self.increment_functional(&trial, y_prev, tau);
                if phi_trial <= phi + cfg.armijo * alpha * slope + slack {
                    accepted = Some((trial, phi_trial));
                    break;
                }
                alpha *= cfg.backtracking;
            }
            let (trial, phi_trial) =
                accepted.ok_or(OracleError::LineSearch { iteration, gradient_norm: report.gradient_norm })?;
            y = trial;
            phi = phi_trial;
            grad = self.reduction.reduce_vector(&self.gradient(&y, y_prev, tau)?);
        }
        Err(OracleError::NotConverged { iterations: cfg.max_iterations, gradient_norm: report.gradient_norm })
    }

    /// Factorizes `H + shift M`, starting from the solver shift and growing
    /// it tenfold until the factorization succeeds.
    fn factor_with_shift(&self, hess: &CsrMatrix) -> Result<(SparseCholesky, f64), OracleError> {
        let mut delta = self.shift_delta;
        while delta <= 1e8 {
            let (op, _) = shifted_operator(hess, &self.mass, delta);
            match SparseCholesky::factor(&op) {
                Ok(chol) => return Ok((chol, delta)),
                Err(LinsolveError::Indefinite { .. }) => delta *= 10.0,
                Err(e) => return Err(e.into()),
            }
        }
        Err(OracleError::NoDefiniteShift)
    }

    /// Final state after `round(T / tau)` implicit steps from `y0`.
    pub fn run(&self, mut y0: DeformationField, tau: f64, t_final: f64) -> Result<DeformationField, OracleError> {
        let steps = step_count(t_final, tau)?;
        self.loads.impose_dirichlet(&self.space.mesh, &mut y0)?;
        let mut y = y0;
        for _ in 0..steps {
            y = self.step(&y, tau)?.0;
        }
        Ok(y)
    }
}

/// Minimizes `f_Y(Z) = dW(Y) : Z + 2c |sym(Y^T Z)|^2` over all 3x3 `Z` by
/// conjugate gradients from a random start, without using the closed form.
/// Returns `(min f_Y, argmin)`; different seeds give minimizers differing by
/// an element of the kernel `{Y^-T A : A skew}`.
pub fn brute_force_fy_min(y: &Mat3, p: &MaterialParams, seed: u64) -> Result<(f64, Mat3), OracleError> {
    let stress = material::stress_pk1(y, p)?;
    let hess = |z: &Mat3| 4.0 * p.c * y * material::sym(&(y.transpose() * z));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    let scale = stress.norm().max(4.0 * p.c * y.norm_squared() * z.norm()).max(f64::MIN_POSITIVE);
    for _restart in 0..20 {
        let mut r = -(stress + hess(&z));
        if r.norm() <= 1e-14 * scale {
            break;
        }
        let mut d = r;
        for _ in 0..9 {
            let hd = hess(&d);
            let curvature = ddot(&d, &hd);
            if curvature <= 0.0 {
                break;
            }
            let alpha = ddot(&r, &r) / curvature;
            z += alpha * d;
            let r_new = r - alpha * hd;
            let beta = ddot(&r_new, &r_new) / ddot(&r, &r);
            r = r_new;
            if r.norm() <= 1e-14 * scale {
                break;
            }
            d = r + beta * d;
        }
    }
    let residual = (stress + hess(&z)).norm();
    if residual > 1e-12 * scale {
        return Err(OracleError::BruteForce(residual));
    }
    Ok((material::power_density(y, &z, p)?, z))
}

/// Time discretizations that can be compared on a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LinearizedExplicit,
    NonlinearImplicit,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::LinearizedExplicit => "linearized_explicit",
            Scheme::NonlinearImplicit => "nonlinear_implicit",
        }
    }
}

/// Nonlinear problem data shared by both schemes.
#[derive(Debug, Clone)]
pub struct TrajectoryProblem {
    pub mesh: Mesh,
    pub params: MaterialParams,
    pub loads: LoadSpec,
    pub solver: SolverConfig,
    pub newton: NewtonConfig,
}

impl TrajectoryProblem {
    /// Final deformation of `scheme` after `round(T / tau)` steps from `y0`.
    pub fn run(&self, scheme: Scheme, y0: &DeformationField, tau: f64, t_final: f64) -> Result<DeformationField, OracleError> {
        match scheme {
            Scheme::LinearizedExplicit => {
                let mut sim = Simulation::new(self.mesh.clone(), self.params, self.loads.clone(), self.solver)?;
                Ok(sim.run(y0.clone(), tau, t_final, |_, _| Ok(()))?.0.y)
            }
            Scheme::NonlinearImplicit => {
                let implicit =
                    NonlinearImplicit::new(self.mesh.clone(), self.params, self.loads.clone(), self.newton, &self.solver)?;
                implicit.run(y0.clone(), tau, t_final)
            }
        }
    }
}

/// `(max nodal |a - b|, sqrt((a - b)^T M (a - b)))`.
pub fn deviation(mass: &CsrMatrix, a: &[f64], b: &[f64]) -> Result<(f64, f64), OracleError> {
    if a.len() != b.len() || a.len() != mass.dim() {
        return Err(OracleError::LengthMismatch(a.len(), b.len()));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let linf = diff.chunks_exact(3).map(|d| Vector3::new(d[0], d[1], d[2]).norm()).fold(0.0, f64::max);
    Ok((linf, mass.quadratic_form(&diff).max(0.0).sqrt()))
}

/// Largest absolute dof difference.
pub fn max_abs_difference(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm_inf(&diff)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub tau: f64,
    pub scheme_a: Scheme,
    pub scheme_b: Scheme,
    /// `None` when one of the runs failed; the failure is kept in `error`.
    pub deviation: Option<(f64, f64)>,
    pub error: Option<String>,
}

/// Runs both schemes for every `tau` and records their final deviation.
/// A failing run marks its row and the sweep continues.
pub fn compare_schemes(
    problem: &TrajectoryProblem,
    y0: &DeformationField,
    t_final: f64,
    taus: &[f64],
    scheme_a: Scheme,
    scheme_b: Scheme,
) -> Result<Vec<ComparisonRow>, OracleError> {
    let space = FeSpace::new(problem.mesh.clone())?;
    let mass = assemble_mass(&Assembler::new(&space), &space)?;
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let outcome = problem.run(scheme_a, y0, tau, t_final).and_then(|a| {
            let b = if scheme_b == scheme_a { a.clone() } else { problem.run(scheme_b, y0, tau, t_final)? };
            deviation(&mass, &a.dofs, &b.dofs)
        });
        let (deviation, error) = match outcome {
            Ok(d) => (Some(d), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(ComparisonRow { tau, scheme_a, scheme_b, deviation, error });
    }
    Ok(rows)
}

/// CSV with [`COMPARISON_HEADER`]; failed rows carry `NaN` deviations.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{COMPARISON_HEADER}")?;
    for r in rows {
        let (linf, l2) = r.deviation.unwrap_or((f64::NAN, f64::NAN));
        writeln!(out, "{},{},{},{},{}", r.tau, r.scheme_a.name(), r.scheme_b.name(), linf, l2)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_box_mesh, BoxSpec};

    fn params() -> MaterialParams {
        MaterialParams::new(1.0e3, 1.5e3, 3.0e3).unwrap()
    }

    #[test]
    fn scalar_model_examples() {
        let m = ScalarModel { a: 2.0, d: 3.0 };
        let tau = 0.1;
        assert!((m.implicit_step(1.5, tau) - 1.5 * (3.0 / tau) / (2.0 + 3.0 / tau)).abs() < 1e-15);
        assert!((m.explicit_step(1.5, tau) - 1.5 * (1.0 - tau * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(m.implicit_step(0.0, tau), 0.0);
        assert_eq!(m.explicit_step(0.0, tau), 0.0);
        assert!((m.exact(2.0, 1.5) - 2.0 * (-1.0_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn tensors_act_as_stated() {
        let t = IsotropicTensors::new(2.0, 3.0, 5.0).unwrap();
        let g = Mat3::new(1.0, 2.0, 0.0, 0.0, 1.0, 0.0, 4.0, 0.0, -1.0);
        assert_eq!(t.apply_elasticity(&g), 4.0 * g + 3.0 * Mat3::identity());
        assert_eq!(t.apply_viscosity(&g), 10.0 * g);
        assert!(IsotropicTensors::new(-1.0, 1.0, 1.0).is_err());
        assert!(IsotropicTensors::new(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn linear_model_keeps_zero_state() {
        let mesh = build_box_mesh(&BoxSpec::cube(1)).unwrap();
        let constrained = crate::mesh::node_dofs(&crate::mesh::tag_dirichlet(&mesh, &["z-"]).unwrap());
        let mut lin =
            LinearKelvinVoigt::new(mesh, IsotropicTensors::from_params(&params()), &constrained, &SolverConfig::default())
                .unwrap();
        let zero = vec![0.0; lin.n_dofs()];
        assert_eq!(lin.implicit_step(&zero, 0.1).unwrap(), zero);
        assert_eq!(lin.explicit_step(&zero, 0.1).unwrap(), zero);
    }

    #[test]
    fn brute_force_matches_closed_form() {
        let p = MaterialParams::new(1.0, 1.0, 1.0).unwrap();
        let y = Mat3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0));
        let (min, z) = brute_force_fy_min(&y, &p, 1).unwrap();
        let exact = material::power_density_minimum(&y, &p).unwrap();
        assert!((min - exact).abs() <= 1e-6 * exact.abs());
        let target = (-0.25 / p.c) * y.try_inverse().unwrap() * material::stress_pk1(&y, &p).unwrap();
        assert!((material::sym(&(y.transpose() * z)) - target).norm() < 1e-6);
        let (min_id, _) = brute_force_fy_min(&Mat3::identity(), &p, 2).unwrap();
        assert!(min_id.abs() < 1e-14);
    }

    #[test]
    fn brute_force_minimizers_differ_by_kernel() {
        let p = params();
        let y = Mat3::new(1.1, 0.2, 0.0, -0.1, 0.9, 0.3, 0.05, 0.0, 1.2);
        let (_, z1) = brute_force_fy_min(&y, &p, 11).unwrap();
        let (_, z2) = brute_force_fy_min(&y, &p, 12).unwrap();
        let a = y.transpose() * (z1 - z2);
        assert!((a + a.transpose()).norm() <= 1e-5 * (1.0 + a.norm()));
        assert!((z1 - z2).norm() > 1e-3, "seeds should reach different minimizers");
    }

    #[test]
    fn newton_gradient_matches_finite_differences() {
        let mesh = build_box_mesh(&BoxSpec::cube(1)).unwrap();
        let nl = NonlinearImplicit::new(mesh, params(), LoadSpec::none(), NewtonConfig::default(), &SolverConfig::default())
            .unwrap();
        let prev = DeformationField::affine(&nl.space.mesh, &Mat3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0)), &Vector3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = DeformationField::from_dofs(prev.dofs.iter().map(|v| v + rng.gen_range(-0.02..0.02)).collect());
        let tau = 0.01;
        let g = nl.gradient(&y, &prev, tau).unwrap();
        let h = nl.hessian(&y, &prev, tau).unwrap();
        let dir: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = 1e-6;
        let fd = (nl.increment_functional(&y.advanced(eps, &dir), &prev, tau)
            - nl.increment_functional(&y.advanced(-eps, &dir), &prev, tau))
            / (2.0 * eps);
        assert!((fd - dot(&g, &dir)).abs() <= 1e-6 * fd.abs(), "{fd} vs {}", dot(&g, &dir));
        let gp = nl.gradient(&y.advanced(eps, &dir), &prev, tau).unwrap();
        let gm = nl.gradient(&y.advanced(-eps, &dir), &prev, tau).unwrap();
        let hd = h.matvec(&dir);
        let fd_h: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let err: f64 = fd_h.iter().zip(&hd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-6 * norm(&hd), "{err}");
        assert!(h.is_symmetric(1e-10));
    }

    #[test]
    fn implicit_step_from_rest_is_trivial() {
        let mesh = build_box_mesh(&BoxSpec::cube(1)).unwrap();
        let nl = NonlinearImplicit::new(mesh, params(), LoadSpec::none(), NewtonConfig::default(), &SolverConfig::default())
            .unwrap();
        let y0 = DeformationField::identity(&nl.space.mesh);
        let (y1, report) = nl.step(&y0, 0.01).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(y1, y0);
    }

    #[test]
    fn implicit_step_decreases_incremental_energy() {
        let mesh = build_box_mesh(&BoxSpec::cube(1)).unwrap();
        let nl = NonlinearImplicit::new(mesh, params(), LoadSpec::none(), NewtonConfig::default(), &SolverConfig::default())
            .unwrap();
        let y0 = DeformationField::affine(&nl.space.mesh, &Mat3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0)), &Vector3::zeros());
        let (y1, _) = nl.step(&y0, 0.01).unwrap();
        let w0 = assembly::elastic_energy(&nl.space, &y0, &nl.params);
        let (d2, d) = assembly::dissipation_integrals(&nl.space, &y1, &y0, &nl.params);
        assert!(d > 0.0);
        assert!(nl.increment_functional(&y1, &y0, 0.01) <= w0);
        assert!(assembly::elastic_energy(&nl.space, &y1, &nl.params) + d2 / 0.02 <= w0);
    }

    #[test]
    fn comparison_of_a_scheme_with_itself_is_zero() {
        let mesh = build_box_mesh(&BoxSpec::cube(1)).unwrap();
        let y0 = DeformationField::affine(&mesh, &Mat3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0)), &Vector3::zeros());
        let problem = TrajectoryProblem {
            mesh,
            params: params(),
            loads: LoadSpec::none(),
            solver: SolverConfig::default(),
            newton: NewtonConfig::default(),
        };
        let rows =
            compare_schemes(&problem, &y0, 0.1, &[0.05, 0.3], Scheme::LinearizedExplicit, Scheme::LinearizedExplicit)
                .unwrap();
        assert_eq!(rows[0].deviation, Some((0.0, 0.0)));
        assert!(rows[1].deviation.is_none() && rows[1].error.is_some());
        let mut buf = Vec::new();
        write_comparison_csv(&rows, &mut buf).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], COMPARISON_HEADER);
        assert_eq!(lines[1], "0.05,linearized_explicit,linearized_explicit,0,0");
        assert_eq!(lines[2], "0.3,linearized_explicit,linearized_explicit,NaN,NaN");
    }
}
