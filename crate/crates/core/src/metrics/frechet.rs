use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use num_traits::Float;

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Ridge added to a rank-deficient covariance.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetDistance {
    pub value: f64,
    /// True if either covariance needed the ridge.
    pub regularized: bool,
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn mean_covariance(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mean = x.column_means();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let a = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += a * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

fn regularize(cov: &mut DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(cov.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.min() <= 1e-12 * scale {
        for i in 0..cov.nrows() {
            cov[(i, i)] += COVARIANCE_RIDGE;
        }
        true
    } else {
        false
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(A + B - 2 (A^½ B A^½)^½)` for Gaussian moments.
pub fn frechet_from_moments(mu_a: &[f64], a: &DMatrix<f64>, mu_b: &[f64], b: &DMatrix<f64>) -> f64 {
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = psd_sqrt(a);
    let mut inner = &ra * b * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    (mean_term + a.trace() + b.trace() - 2.0 * cross).max(0.0)
}

/// Fréchet distance between Gaussians fitted to the rows of `x` and `y`.
pub fn frechet_gaussian(x: &Tensor, y: &Tensor) -> Result<FrechetDistance> {
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch {
            expected: x.cols(),
            got: y.cols(),
        });
    }
    let d = x.cols();
    if x.rows() <= d || y.rows() <= d {
        return Err(Error::Empty("frechet distance needs more samples than dimensions"));
    }
    let (ma, mut ca) = mean_covariance(x);
    let (mb, mut cb) = mean_covariance(y);
    let ra = regularize(&mut ca);
    let rb = regularize(&mut cb);
    Ok(FrechetDistance {
        value: frechet_from_moments(&ma, &ca, &mb, &cb),
        regularized: ra || rb,
    })
}
