//! Thin bridge to faer for the dense kernels of the interior-point solver.
//! nalgebra matrices are column-major and contiguous, so views are free.

use faer::linalg::solvers::{Llt, Solve};
use faer::{Accum, MatMut, MatRef, Par, Side};
use nalgebra::{DMatrix, DVector};

fn view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

/// `op(a) * op(b)` where `op` transposes when the flag is set.
pub(crate) fn gemm(a: &DMatrix<f64>, ta: bool, b: &DMatrix<f64>, tb: bool) -> DMatrix<f64> {
    let (av, bv) = (view(a), view(b));
    let av = if ta { av.transpose() } else { av };
    let bv = if tb { bv.transpose() } else { bv };
    let mut out = DMatrix::zeros(av.nrows(), bv.ncols());
    let (r, c) = (out.nrows(), out.ncols());
    if av.ncols() > 0 {
        let ov = MatMut::from_column_major_slice_mut(out.as_mut_slice(), r, c);
        faer::linalg::matmul::matmul(ov, Accum::Replace, av, bv, 1.0, Par::Seq);
    }
    out
}

/// Cholesky factor of a symmetric positive definite matrix.
pub(crate) struct Chol {
    llt: Llt<f64>,
    n: usize,
}

impl Chol {
    fn try_new(m: &DMatrix<f64>) -> Option<Self> {
        let llt = view(m).llt(Side::Lower).ok()?;
        Some(Self { llt, n: m.nrows() })
    }

    /// Factors `m`, adding a growing diagonal shift if it is not numerically
    /// positive definite.
    pub fn regularized(m: &DMatrix<f64>) -> Option<Self> {
        if let Some(c) = Self::try_new(m) {
            return Some(c);
        }
        let scale = m.diagonal().abs().max().max(1e-300);
        let mut eps = 1e-14 * scale;
        for _ in 0..8 {
            let mut r = m.clone();
            for i in 0..r.nrows() {
                r[(i, i)] += eps;
            }
            if let Some(c) = Self::try_new(&r) {
                log::trace!("cholesky of order {} needed shift {eps:.1e} (scale {scale:.1e})", m.nrows());
                return Some(c);
            }
            eps *= 100.0;
        }
        None
    }

    /// Squared ratio of the extreme pivots, a cheap lower bound on the
    /// condition number.
    pub fn pivot_spread(&self) -> f64 {
        let l = self.llt.L();
        let d: Vec<f64> = (0..self.n).map(|i| l[(i, i)].abs()).collect();
        let max = d.iter().cloned().fold(0.0, f64::max);
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        (max / min).powi(2)
    }

    pub fn l(&self) -> DMatrix<f64> {
        let l = self.llt.L();
        DMatrix::from_fn(self.n, self.n, |i, j| l[(i, j)])
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.llt.solve(view(b));
        DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| x[(i, j)])
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self.llt.solve(MatRef::from_column_major_slice(b.as_slice(), b.len(), 1));
        DVector::from_fn(b.len(), |i, _| x[(i, 0)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_nalgebra() {
        let a = DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 2.5);
        let b = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert!((gemm(&a, true, &b, false) - a.transpose() * &b).norm() < 1e-12);
        assert!((gemm(&b, true, &a, false) - b.transpose() * &a).norm() < 1e-12);
        assert!((gemm(&a, false, &a, true) - &a * a.transpose()).norm() < 1e-12);
    }

    #[test]
    fn cholesky_solves_and_regularizes() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = Chol::regularized(&m).unwrap();
        let l = c.l();
        assert!((&l * l.transpose() - &m).norm() < 1e-12);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        assert!((&m * c.solve(&b) - b).norm() < 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Chol::regularized(&singular).is_some());
    }
}
