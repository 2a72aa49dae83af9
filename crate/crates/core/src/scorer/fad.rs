//! Fréchet distance between Gaussians fitted to two embedding sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Added to the covariance diagonal when a set has too few members for full rank.
pub const SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance, shrunk when `n <= dim`.
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn fit(set: &[Vec<f64>]) -> Result<Self> {
        let n = set.len();
        if n < 2 {
            return Err(Error::Precondition(format!("need at least 2 embeddings, got {n}")));
        }
        let dim = set[0].len();
        if dim == 0 || set.iter().any(|e| e.len() != dim) {
            return Err(Error::Precondition("embeddings have inconsistent or zero dimension".into()));
        }
        let mut mean = DVector::zeros(dim);
        for e in set {
            mean += DVector::from_column_slice(e);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for e in set {
            let c = DVector::from_column_slice(e) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        if n <= dim {
            for i in 0..dim {
                cov[(i, i)] += SHRINKAGE;
            }
        }
        Ok(Self { mean, cov, n })
    }
}

/// Symmetric PSD square root with negative eigenvalues clipped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `tr((Σa Σb)^{1/2})`, computed as the trace of the square root of the
/// symmetric product `Σa^{1/2} Σb Σa^{1/2}`, which has the same eigenvalues.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

pub fn frechet(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Precondition(format!(
            "dimension mismatch: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let cross = trace_sqrt_product(&a.cov, &b.cov);
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

pub fn fad(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    frechet(&GaussianStats::fit(set_a)?, &GaussianStats::fit(set_b)?)
}
