use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Smallest admissible squared pivot of a scatter factor, relative to the
/// mean diagonal. Anything below is treated as rank deficient.
pub(crate) const RANK_TOL: f64 = 1e-12;

/// Cholesky factor of an SPD scatter matrix with its log-determinant.
pub(crate) struct Factor {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Factor {
    pub(crate) fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() {
            return Err(Error::DimensionMismatch {
                expected: sigma.nrows(),
                found: sigma.ncols(),
            });
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd);
        }
        let chol = Cholesky::new(sigma.clone()).ok_or(Error::NotSpd)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotSpd);
        }
        Ok(Self { chol, log_det })
    }

    pub(crate) fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Ratio between the smallest squared pivot and the mean diagonal entry.
    pub(crate) fn pivot_ratio(&self, sigma: &DMatrix<f64>) -> f64 {
        let scale = sigma.trace() / sigma.nrows() as f64;
        let min_pivot = self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .fold(f64::INFINITY, |acc, d| acc.min(d * d));
        min_pivot / scale
    }

    /// Quadratic forms `(x - mu)^T Sigma^{-1} (x - mu)` for every column of `cols`.
    pub(crate) fn quad_forms(&self, cols: &DMatrix<f64>, mu: &DVector<f64>) -> DVector<f64> {
        let mut centered = cols.clone();
        for mut c in centered.column_iter_mut() {
            c -= mu;
        }
        self.chol.l_dirty().solve_lower_triangular_mut(&mut centered);
        DVector::from_iterator(
            centered.ncols(),
            centered.column_iter().map(|c| c.norm_squared()),
        )
    }
}

/// Lower-triangular Cholesky factor, or `NotSpd`.
pub(crate) fn cholesky_lower(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(sigma.clone())
        .map(|c| c.l())
        .ok_or(Error::NotSpd)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Numerically stable `log(sum(exp(v)))`.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Observations as columns (`m x n`) from the row-major data layout (`n x m`).
pub(crate) fn columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose()
}
