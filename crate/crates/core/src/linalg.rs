//! Sparse matrices and Krylov solvers for the least-squares problems.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, Default)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(ncols: usize) -> Self {
        CsrMatrix { nrows: 0, ncols, indptr: vec![0], indices: Vec::new(), data: Vec::new() }
    }

    /// Appends a row given as (column, value) pairs; repeated columns are summed.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        let mut row: Vec<(usize, f64)> = entries.to_vec();
        row.sort_by_key(|e| e.0);
        let start = self.indices.len();
        for (c, v) in row {
            debug_assert!(c < self.ncols);
            if self.indices.len() > start && *self.indices.last().unwrap() == c {
                *self.data.last_mut().unwrap() += v;
            } else {
                self.indices.push(c);
                self.data.push(v);
            }
        }
        self.indptr.push(self.indices.len());
        self.nrows += 1;
    }

    /// Appends all rows of `other` (same column count).
    pub fn append(&mut self, other: &CsrMatrix) {
        assert_eq!(self.ncols, other.ncols);
        let base = self.indices.len();
        self.indices.extend_from_slice(&other.indices);
        self.data.extend_from_slice(&other.data);
        self.indptr.extend(other.indptr[1..].iter().map(|p| p + base));
        self.nrows += other.nrows;
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.data[a..b])
    }

    /// `A x`, rows evaluated in parallel (each row is an ordered sum).
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows)
            .into_par_iter()
            .map(|i| {
                let (idx, val) = self.row(i);
                idx.iter().zip(val).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `A^T y`, accumulated serially in row order for reproducibility.
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate().take(self.nrows) {
            if yi == 0.0 {
                continue;
            }
            let (idx, val) = self.row(i);
            for (&c, &v) in idx.iter().zip(val) {
                out[c] += v * yi;
            }
        }
        out
    }

    /// Squared column norms, the diagonal of `A^T A`.
    pub fn column_norms_sq(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (&c, &v) in self.indices.iter().zip(&self.data) {
            out[c] += v * v;
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in out.iter_mut().enumerate() {
            let (idx, val) = self.row(i);
            for (&c, &v) in idx.iter().zip(val) {
                row[c] += v;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone)]
pub struct SolveLog {
    pub iterations: usize,
    /// Normal-equation residual `|b - N x|` after each iteration (entry 0 is the start).
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Preconditioned conjugate gradient for a symmetric positive semidefinite
/// operator `apply`, with diagonal preconditioner `diag` (zeros are skipped).
pub fn pcg(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    diag: &[f64],
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, SolveLog) {
    let n = b.len();
    let inv: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let bnorm = norm2(b);
    let mut residuals = vec![bnorm];
    if bnorm == 0.0 {
        return (x, SolveLog { iterations: 0, residuals, converged: true });
    }
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return (x, SolveLog { iterations: it - 1, residuals, converged: false });
        }
        let alpha = rz / pap;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rn = norm2(&r);
        residuals.push(rn);
        if rn <= tol * bnorm {
            return (x, SolveLog { iterations: it, residuals, converged: true });
        }
        z = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    (x, SolveLog { iterations: max_iter, residuals, converged: false })
}

/// Conjugate residual method for a symmetric operator. It minimizes `|b - N x|`
/// over growing Krylov spaces, so the residual history is nonincreasing.
pub fn conjugate_residual(apply: &dyn Fn(&[f64]) -> Vec<f64>, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, SolveLog) {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let bnorm = norm2(b);
    let mut residuals = vec![bnorm];
    if bnorm == 0.0 {
        return (x, SolveLog { iterations: 0, residuals, converged: true });
    }
    let mut p = r.clone();
    let mut ar = apply(&r);
    let mut ap = ar.clone();
    let mut rar = dot(&r, &ar);
    for it in 1..=max_iter {
        let apap = dot(&ap, &ap);
        if !(apap > 0.0) || rar == 0.0 {
            return (x, SolveLog { iterations: it - 1, residuals, converged: false });
        }
        let alpha = rar / apap;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rn = norm2(&r);
        residuals.push(rn);
        if rn <= tol * bnorm {
            return (x, SolveLog { iterations: it, residuals, converged: true });
        }
        ar = apply(&r);
        let rar_new = dot(&r, &ar);
        let beta = rar_new / rar;
        rar = rar_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    (x, SolveLog { iterations: max_iter, residuals, converged: false })
}

/// Largest eigenvalue estimate of a symmetric positive semidefinite operator
/// by power iteration from a fixed start vector.
pub fn power_iteration(apply: &dyn Fn(&[f64]) -> Vec<f64>, n: usize, steps: usize) -> f64 {
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|a| *a /= nx);
    let mut lambda = 0.0;
    for _ in 0..steps {
        let y = apply(&x);
        lambda = dot(&x, &y);
        let ny = norm2(&y);
        if ny == 0.0 {
            return 0.0;
        }
        x = y.into_iter().map(|a| a / ny).collect();
    }
    lambda
}

/// Turns an unconverged solve into a solver error carrying the history.
pub fn require_converged(log: &SolveLog) -> Result<()> {
    if log.converged {
        Ok(())
    } else {
        Err(Error::Solver { iterations: log.iterations, residual: *log.residuals.last().unwrap_or(&f64::NAN), history: log.residuals.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CsrMatrix {
        let mut a = CsrMatrix::new(cols);
        for _ in 0..rows {
            let entries: Vec<(usize, f64)> = (0..4).map(|_| (rng.random_range(0..cols), rng.random_range(-1.0..1.0))).collect();
            a.push_row(&entries);
        }
        a
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 40, 15);
        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&a.mul_vec(&x), &y);
        let rhs = dot(&x, &a.tr_mul_vec(&y));
        assert!((lhs - rhs).abs() < 1e-12);
        let dense = a.to_dense();
        let diag = a.column_norms_sq();
        for (c, dc) in diag.iter().enumerate() {
            let s: f64 = dense.iter().map(|r| r[c] * r[c]).sum();
            assert!((s - dc).abs() < 1e-12);
        }
    }

    #[test]
    fn solvers_reach_least_squares_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 80, 20);
        let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = a.mul_vec(&xs);
        let atb = a.tr_mul_vec(&b);
        let normal = |v: &[f64]| a.tr_mul_vec(&a.mul_vec(v));
        let (x, log) = pcg(&normal, &atb, &a.column_norms_sq(), 1e-12, 500);
        assert!(log.converged);
        let r: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(norm2(&r) < 1e-8);
        let (_, log) = conjugate_residual(&normal, &atb, 1e-10, 500);
        assert!(log.converged);
        assert!(log.residuals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let diag = [1.0, 5.0, 2.0, 0.5];
        let apply = |v: &[f64]| v.iter().zip(&diag).map(|(a, b)| a * b).collect::<Vec<f64>>();
        assert!((power_iteration(&apply, 4, 200) - 5.0).abs() < 1e-8);
    }

    #[test]
    fn unconverged_solve_is_an_error() {
        let log = SolveLog { iterations: 3, residuals: vec![1.0, 0.5, 0.4, 0.3], converged: false };
        assert!(matches!(require_converged(&log), Err(Error::Solver { iterations: 3, .. })));
    }
}
