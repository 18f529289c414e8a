use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

use super::frechet::mean_covariance;
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Principal subspace: the data mean and the top-`k` covariance
/// eigenvectors as columns of a `[d, k]` basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub basis: Tensor,
    pub variances: Vec<f64>,
}

pub fn pca_fit(data: &Tensor, k: usize) -> Result<Pca> {
    let d = data.cols();
    if k == 0 || k > d {
        return Err(Error::InvalidConfig(alloc::format!("pca dimension {k} not in 1..={d}")));
    }
    if data.rows() < 2 {
        return Err(Error::Empty("pca needs at least two rows"));
    }
    let (mean, cov) = mean_covariance(data);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Tensor::zeros(&[d, k]);
    let mut variances = Vec::with_capacity(k);
    for (c, &e) in order.iter().take(k).enumerate() {
        variances.push(eig.eigenvalues[e]);
        for r in 0..d {
            basis.data_mut()[r * k + c] = eig.eigenvectors[(r, e)];
        }
    }
    Ok(Pca { mean, basis, variances })
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    /// Coordinates of the rows of `x` in the principal subspace.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let (d, k) = (self.basis.rows(), self.basis.cols());
        if x.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.cols(),
            });
        }
        let centered = DMatrix::from_fn(x.rows(), d, |r, c| x.get(r, c) - self.mean[c]);
        let b = DMatrix::from_row_slice(d, k, self.basis.data());
        let p = centered * b;
        Tensor::from_vec(
            &[x.rows(), k],
            (0..x.rows())
                .flat_map(|r| (0..k).map(move |c| (r, c)))
                .map(|(r, c)| p[(r, c)])
                .collect(),
        )
    }

    /// Maps subspace coordinates back to the ambient space.
    pub fn reconstruct(&self, coords: &Tensor) -> Result<Tensor> {
        let (d, k) = (self.basis.rows(), self.basis.cols());
        if coords.cols() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: coords.cols(),
            });
        }
        let mut out = Vec::with_capacity(coords.rows() * d);
        for r in 0..coords.rows() {
            let c = coords.row(r);
            for i in 0..d {
                out.push(self.mean[i] + (0..k).map(|j| self.basis.get(i, j) * c[j]).sum::<f64>());
            }
        }
        Tensor::from_vec(&[coords.rows(), d], out)
    }
}

/// The `k_nn` rows of `train` closest to `query` in Euclidean distance
/// (after projection when `pca` is given), as `(index, distance)` sorted by
/// distance with ties broken by index.
pub fn nearest_neighbors(query: &[f64], train: &Tensor, k_nn: usize, pca: Option<&Pca>) -> Result<Vec<(usize, f64)>> {
    if k_nn > train.rows() {
        return Err(Error::InvalidConfig(alloc::format!(
            "asked for {k_nn} neighbours of a {}-row set",
            train.rows()
        )));
    }
    if query.len() != train.cols() {
        return Err(Error::DimensionMismatch {
            expected: train.cols(),
            got: query.len(),
        });
    }
    let (q, t) = match pca {
        Some(p) => (
            p.project(&Tensor::from_vec(&[1, query.len()], query.to_vec())?)?,
            p.project(train)?,
        ),
        None => (Tensor::from_vec(&[1, query.len()], query.to_vec())?, train.clone()),
    };
    let q = q.row(0);
    let mut d: Vec<(usize, f64)> = (0..t.rows())
        .map(|i| {
            let s: f64 = t.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            (i, libm::sqrt(s))
        })
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k_nn);
    Ok(d)
}
