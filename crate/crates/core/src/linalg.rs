//! Small dense linear algebra for the QP solver.
//!
//! Problems here are a few hundred variables at most, so everything is dense,
//! allocation-light, and strictly deterministic (no pivoting heuristics that
//! depend on runtime state). Factorizations:
//!
//! * Cholesky for the symmetric positive definite normal equations.
//! * Unpivoted LDL^T for symmetric quasi-definite KKT systems, which are
//!   strongly factorizable without pivoting when the (1,1) block is shifted
//!   positive and the (2,2) block shifted negative.

use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    nrows: usize,
    ncols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, data: vec![S::zero(); nrows * ncols] }
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.data[i * self.ncols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.data[i * self.ncols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.data[i * self.ncols + j] += v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    /// Copy another matrix of identical shape into self.
    pub fn copy_from(&mut self, other: &Mat<S>) {
        debug_assert_eq!(self.nrows, other.nrows);
        debug_assert_eq!(self.ncols, other.ncols);
        self.data.copy_from_slice(&other.data);
    }

    /// y = A x.
    pub fn matvec(&self, x: &[S], y: &mut [S]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for i in 0..self.nrows {
            y[i] = crate::scalar::dot(self.row(i), x);
        }
    }
}

/// In-place Cholesky factorization of a symmetric positive definite matrix
/// (only the lower triangle is read; L lands in the lower triangle).
/// Fails on a non-positive pivot.
pub fn cholesky_in_place<S: Scalar>(a: &mut Mat<S>) -> Result<(), usize> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let l = a.get(j, k);
            d -= l * l;
        }
        if d <= S::zero() || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        a.set(j, j, d);
        for i in (j + 1)..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= a.get(i, k) * a.get(j, k);
            }
            a.set(i, j, v / d);
        }
    }
    Ok(())
}

/// Solve L L^T x = b in place given a Cholesky factor in the lower triangle.
pub fn cholesky_solve<S: Scalar>(l: &Mat<S>, b: &mut [S]) {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    // Forward: L y = b.
    for i in 0..n {
        let mut v = b[i];
        let row = l.row(i);
        for (k, bk) in b[..i].iter().enumerate() {
            v -= row[k] * *bk;
        }
        b[i] = v / row[i];
    }
    // Backward: L^T x = y.
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= l.get(k, i) * b[k];
        }
        b[i] = v / l.get(i, i);
    }
}

/// In-place unpivoted LDL^T of a symmetric matrix (lower triangle read and
/// written; D on the diagonal). Fails when a pivot's magnitude falls below
/// `min_pivot`. Suitable for quasi-definite KKT matrices.
pub fn ldlt_in_place<S: Scalar>(a: &mut Mat<S>, min_pivot: S) -> Result<(), usize> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let l = a.get(j, k);
            d -= l * l * a.get(k, k);
        }
        if d.abs() < min_pivot || !d.is_finite() {
            return Err(j);
        }
        a.set(j, j, d);
        for i in (j + 1)..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= a.get(i, k) * a.get(j, k) * a.get(k, k);
            }
            a.set(i, j, v / d);
        }
    }
    Ok(())
}

/// Solve L D L^T x = b in place given an LDL^T factor.
pub fn ldlt_solve<S: Scalar>(f: &Mat<S>, b: &mut [S]) {
    let n = f.nrows();
    debug_assert_eq!(b.len(), n);
    for i in 0..n {
        let mut v = b[i];
        let row = f.row(i);
        for (k, bk) in b[..i].iter().enumerate() {
            v -= row[k] * *bk;
        }
        b[i] = v;
    }
    for (i, bi) in b.iter_mut().enumerate() {
        *bi /= f.get(i, i);
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= f.get(k, i) * b[k];
        }
        b[i] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Mat<f64> {
        let mut m = Mat::zeros(rows.len(), rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        m
    }

    #[test]
    fn cholesky_solves_spd_system() {
        // A = [[4,2,0],[2,3,1],[0,1,2]], x* = [1,-2,3] -> b = A x*.
        let a = mat(&[&[4.0, 2.0, 0.0], &[2.0, 3.0, 1.0], &[0.0, 1.0, 2.0]]);
        let xs = [1.0, -2.0, 3.0];
        let mut b = [0.0; 3];
        a.matvec(&xs, &mut b);
        let mut f = a.clone();
        cholesky_in_place(&mut f).unwrap();
        cholesky_solve(&f, &mut b);
        for (got, want) in b.iter().zip(xs.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = mat(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(cholesky_in_place(&mut a).is_err());
    }

    #[test]
    fn ldlt_solves_quasi_definite_kkt() {
        // [[2,0,1],[0,2,1],[1,1,-1e-9]] : classic KKT with dual regularization.
        let a = mat(&[&[2.0, 0.0, 1.0], &[0.0, 2.0, 1.0], &[1.0, 1.0, -1e-9]]);
        let xs = [0.5, -1.5, 2.0];
        let mut b = [0.0; 3];
        a.matvec(&xs, &mut b);
        let mut f = a.clone();
        ldlt_in_place(&mut f, 1e-300).unwrap();
        ldlt_solve(&f, &mut b);
        for (got, want) in b.iter().zip(xs.iter()) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}
