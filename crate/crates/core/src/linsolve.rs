//! Solution of the shifted system `(K + delta s M) z = b`.
//!
//! `K` is only positive semidefinite when no Dirichlet condition removes the
//! rigid-motion kernel, so a small multiple of the mass matrix is added. The
//! shift is made dimensionless with `s = max diag K / max diag M`.
//!
//! Two routes share one contract (the relative residual bound):
//! [`solve_spd`] is a Jacobi-preconditioned conjugate gradient, and
//! [`ShiftedSpdSolver`] runs conjugate gradients preconditioned by a sparse
//! Cholesky factor that is refreshed only when the iteration count grows.
//! Along a trajectory the operator changes by `O(tau)` per step, so a stale
//! factor stays an excellent preconditioner for many steps.

use std::sync::Arc;

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{dot, norm, CsrMatrix, SparsityPattern};

/// Multiple of machine epsilon in the rounding floor of [`pcg`].
pub const ROUNDOFF_FLOOR: f64 = 64.0;

#[derive(Debug, Error, PartialEq)]
pub enum LinsolveError {
    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {relative_residual:e})")]
    NotConverged { iterations: usize, relative_residual: f64 },
    #[error("operator is not positive definite: curvature {curvature:e} at iteration {iteration}")]
    Indefinite { iteration: usize, curvature: f64 },
    #[error("dimension mismatch: matrix {matrix}, mass {mass}, rhs {rhs}")]
    DimensionMismatch { matrix: usize, mass: usize, rhs: usize },
    #[error("sparse Cholesky factorization failed: {0}")]
    Factorization(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Relative shift `delta`.
    pub shift_delta: f64,
    /// Bound on `|A z - b| / |b|`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Refresh the Cholesky preconditioner once a solve needs more
    /// iterations than this.
    pub refactor_after: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { shift_delta: 1e-8, tolerance: 1e-10, max_iterations: 20_000, refactor_after: 12 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), LinsolveError> {
        let ok = self.shift_delta > 0.0
            && self.shift_delta.is_finite()
            && self.tolerance > 0.0
            && self.tolerance < 1.0
            && self.max_iterations > 0
            && self.refactor_after > 0;
        if ok {
            Ok(())
        } else {
            Err(LinsolveError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    /// The applied shift `delta * s`.
    pub shift: f64,
    /// Whether a Cholesky factorization was computed during this solve.
    pub factorized: bool,
}

/// `K + delta s M` together with the applied shift `delta s`.
pub fn shifted_operator(k: &CsrMatrix, m: &CsrMatrix, delta: f64) -> (CsrMatrix, f64) {
    let mass_scale = m.max_diagonal();
    let s = if mass_scale > 0.0 { k.max_diagonal() / mass_scale } else { 0.0 };
    // an all-zero K still needs a definite operator
    let s = if s > 0.0 { s } else { 1.0 };
    let shift = delta * s;
    (k.add_scaled(shift, m), shift)
}

fn check_dims(k: &CsrMatrix, m: &CsrMatrix, b: &[f64]) -> Result<(), LinsolveError> {
    if k.dim() != m.dim() || k.dim() != b.len() {
        return Err(LinsolveError::DimensionMismatch { matrix: k.dim(), mass: m.dim(), rhs: b.len() });
    }
    Ok(())
}

/// Preconditioned conjugate gradients on an SPD operator. Stops when the
/// true residual satisfies `|A x - b| <= tol |b|`, or when it reaches the
/// rounding floor `ROUNDOFF_FLOOR * eps * |A|_F |x|` below which no
/// iteration can make progress (this only matters for right-hand sides that
/// are themselves at rounding level, e.g. at equilibrium).
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    precondition: &dyn Fn(&[f64], &mut [f64]),
    tol: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, usize, f64), LinsolveError> {
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], 0, 0.0));
    }
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let a_norm = a.frobenius_norm();
    let floor = |x: &[f64]| ROUNDOFF_FLOOR * f64::EPSILON * a_norm * norm(x);
    // restarts guard against drift of the recursive residual
    for _restart in 0..5 {
        a.matvec_into(&x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let mut rel = norm(&r) / b_norm;
        if rel <= tol || rel * b_norm <= floor(&x) {
            return Ok((x, iterations, rel));
        }
        precondition(&r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        while iterations < max_iterations {
            iterations += 1;
            a.matvec_into(&p, &mut ap);
            let curvature = dot(&p, &ap);
            if !(curvature > 0.0) {
                return Err(LinsolveError::Indefinite { iteration: iterations, curvature });
            }
            let alpha = rz / curvature;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            rel = norm(&r) / b_norm;
            if rel <= 0.5 * tol || rel * b_norm <= 0.5 * floor(&x) {
                break;
            }
            precondition(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if iterations >= max_iterations {
            a.matvec_into(&x, &mut r);
            let true_rel = r.iter().zip(b).map(|(ri, bi)| (bi - ri).powi(2)).sum::<f64>().sqrt() / b_norm;
            if true_rel <= tol || true_rel * b_norm <= floor(&x) {
                return Ok((x, iterations, true_rel));
            }
            return Err(LinsolveError::NotConverged { iterations, relative_residual: true_rel });
        }
    }
    a.matvec_into(&x, &mut r);
    let rel = r.iter().zip(b).map(|(ri, bi)| (bi - ri).powi(2)).sum::<f64>().sqrt() / b_norm;
    if rel <= tol || rel * b_norm <= floor(&x) {
        Ok((x, iterations, rel))
    } else {
        Err(LinsolveError::NotConverged { iterations, relative_residual: rel })
    }
}

/// Solves `(K + delta s M) z = b` by Jacobi-preconditioned conjugate gradients.
pub fn solve_spd(
    k: &CsrMatrix,
    m: &CsrMatrix,
    b: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport), LinsolveError> {
    cfg.validate()?;
    check_dims(k, m, b)?;
    let (a, shift) = shifted_operator(k, m, cfg.shift_delta);
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let jacobi = |r: &[f64], z: &mut [f64]| {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&inv_diag) {
            *zi = ri * di;
        }
    };
    let (z, iterations, relative_residual) = pcg(&a, b, None, &jacobi, cfg.tolerance, cfg.max_iterations)?;
    Ok((z, SolveReport { iterations, relative_residual, shift, factorized: false }))
}

/// Makes the sparse factorizations run on the calling thread only, so that
/// repeated runs are bitwise reproducible. This is a process-wide setting.
pub fn use_sequential_factorization() {
    faer::set_global_parallelism(faer::Par::Seq);
}

/// Sparse Cholesky factorization `A = L L^T` of a symmetric positive definite
/// CSR matrix (only its lower triangle is read).
pub struct SparseCholesky {
    pattern: Arc<SparsityPattern>,
    symbolic: SymbolicLlt<usize>,
    factor: Llt<usize, f64>,
}

impl std::fmt::Debug for SparseCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseCholesky").field("n", &self.pattern.n).finish()
    }
}

fn faer_view<'a>(pattern: &'a SparsityPattern, values: &'a [f64]) -> SparseColMatRef<'a, usize, f64> {
    // symmetric CSR is the CSC of the same matrix
    let symbolic = SymbolicSparseColMatRef::new_checked(pattern.n, pattern.n, &pattern.row_ptr, None, &pattern.col_idx);
    SparseColMatRef::new(symbolic, values)
}

impl SparseCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinsolveError> {
        let pattern = a.pattern.clone();
        let view = faer_view(&pattern, &a.values);
        let symbolic = SymbolicLlt::try_new(view.symbolic(), Side::Lower)
            .map_err(|e| LinsolveError::Factorization(format!("{e:?}")))?;
        let factor = Self::numeric(&symbolic, view)?;
        Ok(Self { pattern, symbolic, factor })
    }

    fn numeric(symbolic: &SymbolicLlt<usize>, view: SparseColMatRef<'_, usize, f64>) -> Result<Llt<usize, f64>, LinsolveError> {
        Llt::try_new_with_symbolic(symbolic.clone(), view, Side::Lower)
            .map_err(|_| LinsolveError::Indefinite { iteration: 0, curvature: f64::NAN })
    }

    /// Refactors a matrix with the same pattern, reusing the symbolic analysis.
    pub fn refactor(&mut self, a: &CsrMatrix) -> Result<(), LinsolveError> {
        if !Arc::ptr_eq(&a.pattern, &self.pattern) && *a.pattern != *self.pattern {
            *self = Self::factor(a)?;
            return Ok(());
        }
        self.factor = Self::numeric(&self.symbolic, faer_view(&self.pattern, &a.values))?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn solve_into(&self, b: &[f64], out: &mut [f64]) {
        out.copy_from_slice(b);
        let n = out.len();
        let rhs = MatMut::from_column_major_slice_mut(out, n, 1);
        self.factor.solve_in_place_with_conj(Conj::No, rhs);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; b.len()];
        self.solve_into(b, &mut out);
        out
    }
}

/// Stateful solver for a sequence of slowly varying shifted systems.
#[derive(Debug, Default)]
pub struct ShiftedSpdSolver {
    pub cfg: SolverConfig,
    cholesky: Option<SparseCholesky>,
    stale: bool,
    pub factorizations: usize,
}

impl ShiftedSpdSolver {
    pub fn new(cfg: SolverConfig) -> Result<Self, LinsolveError> {
        cfg.validate()?;
        Ok(Self { cfg, cholesky: None, stale: true, factorizations: 0 })
    }

    pub fn solve(
        &mut self,
        k: &CsrMatrix,
        m: &CsrMatrix,
        b: &[f64],
        x0: Option<&[f64]>,
    ) -> Result<(Vec<f64>, SolveReport), LinsolveError> {
        check_dims(k, m, b)?;
        let (a, shift) = shifted_operator(k, m, self.cfg.shift_delta);
        if k.dim() == 0 {
            return Ok((Vec::new(), SolveReport { shift, ..Default::default() }));
        }
        let mut factorized = false;
        let pattern_changed = self
            .cholesky
            .as_ref()
            .map_or(true, |c| !Arc::ptr_eq(&c.pattern, &a.pattern) && *c.pattern != *a.pattern);
        if self.stale || pattern_changed {
            self.refresh(&a)?;
            factorized = true;
        }
        let (tol, max_iterations) = (self.cfg.tolerance, self.cfg.max_iterations);
        let attempt = |chol: &SparseCholesky| {
            let apply = |r: &[f64], z: &mut [f64]| chol.solve_into(r, z);
            pcg(&a, b, x0, &apply, tol, max_iterations)
        };
        let result = match attempt(self.cholesky.as_ref().expect("factor present")) {
            Err(LinsolveError::NotConverged { .. }) if !factorized => {
                self.refresh(&a)?;
                factorized = true;
                attempt(self.cholesky.as_ref().expect("factor present"))
            }
            other => other,
        };
        let (z, iterations, relative_residual) = result?;
        self.stale = iterations > self.cfg.refactor_after;
        Ok((z, SolveReport { iterations, relative_residual, shift, factorized }))
    }

    fn refresh(&mut self, a: &CsrMatrix) -> Result<(), LinsolveError> {
        match &mut self.cholesky {
            Some(c) => c.refactor(a)?,
            None => self.cholesky = Some(SparseCholesky::factor(a)?),
        }
        self.factorizations += 1;
        self.stale = false;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = (0..n).map(|k| b[i][k] * b[j][k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
            }
        }
        a
    }

    /// Dense Cholesky solve used as the reference.
    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    l[i][i] = (a[i][i] - s).sqrt();
                } else {
                    l[i][j] = (a[i][j] - s) / l[j][j];
                }
            }
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
        }
        x
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let k = CsrMatrix::identity(4);
        let (z, rep) = solve_spd(&k, &k, &[0.0; 4], &SolverConfig::default()).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn identity_system_is_scaled_by_shift() {
        let k = CsrMatrix::identity(5);
        let b = [1.0, -2.0, 3.0, 0.5, 7.0];
        let cfg = SolverConfig { shift_delta: 1e-3, ..Default::default() };
        let (z, rep) = solve_spd(&k, &k, &b, &cfg).unwrap();
        assert_eq!(rep.shift, 1e-3);
        for (zi, bi) in z.iter().zip(&b) {
            assert!((zi - bi / (1.0 + 1e-3)).abs() < 1e-14);
        }
    }

    #[test]
    fn random_spd_matches_dense_factorization() {
        let a = random_spd(50, 7);
        let k = CsrMatrix::from_dense(&a);
        let m = CsrMatrix::identity(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let cfg = SolverConfig::default();
        let (z, rep) = solve_spd(&k, &m, &b, &cfg).unwrap();
        assert!(rep.relative_residual <= cfg.tolerance);
        let (shifted, _) = shifted_operator(&k, &m, cfg.shift_delta);
        let reference = dense_solve(&shifted.to_dense(), &b);
        let err = z.iter().zip(&reference).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-8 * norm(&reference), "{err}");

        let mut solver = ShiftedSpdSolver::new(cfg).unwrap();
        let (z2, rep2) = solver.solve(&k, &m, &b, None).unwrap();
        assert!(rep2.factorized && rep2.iterations <= 2);
        let err2 = z2.iter().zip(&reference).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(err2 <= 1e-8 * norm(&reference));
    }

    #[test]
    fn lagged_factor_still_meets_tolerance() {
        let a = random_spd(30, 8);
        let k = CsrMatrix::from_dense(&a);
        let m = CsrMatrix::identity(30);
        let b = vec![1.0; 30];
        let mut solver = ShiftedSpdSolver::new(SolverConfig::default()).unwrap();
        solver.solve(&k, &m, &b, None).unwrap();
        let perturbed = k.add_scaled(0.01, &k);
        let (z, rep) = solver.solve(&perturbed, &m, &b, None).unwrap();
        assert!(!rep.factorized);
        let (op, _) = shifted_operator(&perturbed, &m, 1e-8);
        let r: Vec<f64> = op.matvec(&z).iter().zip(&b).map(|(x, y)| x - y).collect();
        assert!(norm(&r) <= 1e-10 * norm(&b));
        assert_eq!(solver.factorizations, 1);
    }

    #[test]
    fn indefinite_operator_is_reported() {
        let k = CsrMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        let m = CsrMatrix::identity(2);
        let err = solve_spd(&k, &m, &[1.0, 1.0], &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, LinsolveError::Indefinite { .. }));
        let mut solver = ShiftedSpdSolver::new(SolverConfig::default()).unwrap();
        assert!(matches!(solver.solve(&k, &m, &[1.0, 1.0], None), Err(LinsolveError::Indefinite { .. })));
    }

    #[test]
    fn non_convergence_is_reported() {
        let a = random_spd(40, 9);
        let k = CsrMatrix::from_dense(&a);
        let m = CsrMatrix::identity(40);
        let cfg = SolverConfig { max_iterations: 2, ..Default::default() };
        assert!(matches!(
            solve_spd(&k, &m, &vec![1.0; 40], &cfg),
            Err(LinsolveError::NotConverged { iterations: 2, .. })
        ));
    }

    #[test]
    fn rejects_bad_config_and_dims() {
        let cfg = SolverConfig { shift_delta: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let k = CsrMatrix::identity(3);
        assert!(matches!(
            solve_spd(&k, &k, &[1.0], &SolverConfig::default()),
            Err(LinsolveError::DimensionMismatch { .. })
        ));
    }
}
