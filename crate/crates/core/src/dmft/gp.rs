//! Sampling jointly Gaussian histories one block at a time.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Lower-triangular factor that grows by whole rows, so a Gaussian history
/// can be extended with a new block that is correlated with every earlier
/// coordinate without refactoring.
///
/// Pivots at or below `tol` (relative to the diagonal entry) are clipped to
/// zero: the new coordinate is then an exact linear function of earlier ones,
/// which is how paired neurons and other exact degeneracies are represented.
/// Pivots below `-neg_tol` are reported as a numerical error.
#[derive(Debug, Clone)]
pub struct IncrementalCholesky {
    rows: Vec<Vec<f64>>,
    tol: f64,
    neg_tol: f64,
    clipped: usize,
    worst_negative: f64,
}

impl IncrementalCholesky {
    pub fn new(tol: f64, neg_tol: f64) -> Self {
        Self { rows: Vec::new(), tol, neg_tol, clipped: 0, worst_negative: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Number of pivots clipped to zero so far.
    pub fn clipped(&self) -> usize {
        self.clipped
    }

    /// Most negative relative pivot seen before clipping (0 if none).
    pub fn worst_negative(&self) -> f64 {
        self.worst_negative
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Append one coordinate; `cov` holds its covariance with all existing
    /// coordinates followed by its own variance.
    pub fn push(&mut self, cov: &[f64]) -> Result<()> {
        let n = self.rows.len();
        if cov.len() != n + 1 {
            return Err(Error::numerical(format!(
                "covariance row has length {} but {} was expected",
                cov.len(),
                n + 1
            )));
        }
        let mut row = vec![0.0; n + 1];
        for j in 0..n {
            let lj = &self.rows[j];
            let pivot = lj[j];
            if pivot == 0.0 {
                continue;
            }
            let s: f64 = (0..j).map(|m| row[m] * lj[m]).sum();
            row[j] = (cov[j] - s) / pivot;
        }
        let var = cov[n];
        let rest = var - row[..n].iter().map(|x| x * x).sum::<f64>();
        let scale = var.abs().max(1e-300);
        if rest > self.tol * scale {
            row[n] = rest.sqrt();
        } else {
            if rest < 0.0 {
                self.worst_negative = self.worst_negative.min(rest / scale);
            }
            if rest < -self.neg_tol * scale {
                return Err(Error::numerical(format!(
                    "covariance is not positive semi-definite: pivot {rest:.3e} at coordinate {n} \
                     (variance {var:.3e})"
                )));
            }
            self.clipped += 1;
        }
        self.rows.push(row);
        Ok(())
    }

    /// Append a block of coordinates given their cross-covariance with the
    /// existing ones (`cross`, block x dim) and their own covariance.
    pub fn push_block(&mut self, cross: &DMatrix<f64>, own: &DMatrix<f64>) -> Result<()> {
        let n0 = self.dim();
        let b = own.nrows();
        for i in 0..b {
            let mut cov = Vec::with_capacity(n0 + i + 1);
            cov.extend((0..n0).map(|j| cross[(i, j)]));
            cov.extend((0..=i).map(|j| 0.5 * (own[(i, j)] + own[(j, i)])));
            self.push(&cov)?;
        }
        Ok(())
    }

    /// Coordinate i of L xi.
    #[inline]
    pub fn apply(&self, i: usize, xi: &[f64]) -> f64 {
        self.rows[i].iter().zip(xi).map(|(l, x)| l * x).sum()
    }

    /// L L^T, the covariance actually being sampled.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| {
            let m = i.min(j);
            (0..=m).map(|r| self.rows[i][r] * self.rows[j][r]).sum()
        })
    }
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}
