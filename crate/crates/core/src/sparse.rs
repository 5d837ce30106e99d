//! Compressed sparse row storage for the symmetric operators of the scheme.

use std::sync::Arc;

/// Row offsets and column indices of a square sparse matrix. Patterns are
/// shared between matrices assembled on the same space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Builds a pattern from per-row column lists (sorted and deduplicated here).
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            debug_assert!(row.last().map_or(true, |&c| c < n));
            col_idx.extend(row);
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Position of entry `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.row(i).binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn is_structurally_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).iter().all(|&j| self.position(j, i).is_some()))
    }
}

/// Square sparse matrix in CSR form. `symmetric` records that the values were
/// assembled from a symmetric bilinear form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub pattern: Arc<SparsityPattern>,
    pub values: Vec<f64>,
    pub symmetric: bool,
}

/// The assembled stiffness and mass operators.
pub type SymmetricSparseMatrix = CsrMatrix;

impl CsrMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>, symmetric: bool) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values, symmetric }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let pattern = SparsityPattern::from_rows((0..diag.len()).map(|i| vec![i]).collect());
        Self { pattern: Arc::new(pattern), values: diag.to_vec(), symmetric: true }
    }

    /// Dense row-major input, dropping exact zeros off the diagonal.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let pattern = SparsityPattern::from_rows(
            rows.iter()
                .enumerate()
                .map(|(i, r)| (0..n).filter(|&j| j == i || r[j] != 0.0).collect())
                .collect(),
        );
        let values = (0..n)
            .flat_map(|i| pattern.row(i).iter().map(move |&j| rows[i][j]).collect::<Vec<_>>())
            .collect();
        let mut m = Self { pattern: Arc::new(pattern), values, symmetric: false };
        m.symmetric = m.is_symmetric(0.0);
        m
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
        self.pattern.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(out.len(), self.dim());
        let p = &*self.pattern;
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * x[p.col_idx[k]];
            }
            *o = s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }

    pub fn max_diagonal(&self) -> f64 {
        self.diagonal().into_iter().fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checks `|a_ij - a_ji| <= tol * max|a|` on the whole pattern.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.max_abs();
        let p = &*self.pattern;
        (0..p.n).all(|i| {
            self.row_entries(i).all(|(j, v)| match p.position(j, i) {
                Some(k) => (v - self.values[k]).abs() <= tol * scale,
                None => v == 0.0,
            })
        })
    }

    /// `self + alpha * other`. Patterns must match or `other` must be
    /// contained in `self`'s pattern.
    pub fn add_scaled(&self, alpha: f64, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.dim(), other.dim());
        let mut out = self.clone();
        if Arc::ptr_eq(&self.pattern, &other.pattern) || self.pattern == other.pattern {
            for (o, v) in out.values.iter_mut().zip(&other.values) {
                *o += alpha * v;
            }
        } else {
            for i in 0..other.dim() {
                for (j, v) in other.row_entries(i) {
                    let k = self.pattern.position(i, j).expect("pattern of `other` not contained in `self`");
                    out.values[k] += alpha * v;
                }
            }
        }
        out.symmetric = self.symmetric && other.symmetric;
        out
    }

    pub fn scaled(&self, alpha: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.dim()]; self.dim()];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row_entries(i) {
                row[j] = v;
            }
        }
        d
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
