use alloc::vec::Vec;

use num_traits::Float;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// At most this many points enter the median-distance heuristic.
const MEDIAN_SUBSET: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    Median,
    Fixed(f64),
}

/// `exp(-|a - b|^2 / (2 h^2))`.
pub fn rbf_kernel(a: &[f64], b: &[f64], h: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * h * h)).exp()
}

fn check(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch {
            expected: x.cols(),
            got: y.cols(),
        });
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Empty("mmd needs at least two samples per set"));
    }
    Ok(())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance of `x ∪ y` (evenly thinned to at
/// most 1000 points).
pub fn median_distance(x: &Tensor, y: &Tensor) -> f64 {
    let total = x.rows() + y.rows();
    let stride = total.div_ceil(MEDIAN_SUBSET).max(1);
    let pts: Vec<&[f64]> = (0..total)
        .step_by(stride)
        .map(|i| if i < x.rows() { x.row(i) } else { y.row(i - x.rows()) })
        .collect();
    let mut d = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in 0..i {
            d.push(dist2(pts[i], pts[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let med = m.sqrt();
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn resolve(bw: Bandwidth, x: &Tensor, y: &Tensor) -> Result<f64> {
    let h = match bw {
        Bandwidth::Median => median_distance(x, y),
        Bandwidth::Fixed(h) => h,
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidConfig(alloc::format!(
            "mmd bandwidth must be positive, got {h}"
        )));
    }
    Ok(h)
}

/// Unbiased estimate of squared MMD with a Gaussian kernel.
pub fn mmd_rbf(x: &Tensor, y: &Tensor, bandwidth: Bandwidth) -> Result<f64> {
    check(x, y)?;
    let h = resolve(bandwidth, x, y)?;
    let (m, n) = (x.rows(), y.rows());
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..i {
            kxx += rbf_kernel(x.row(i), x.row(j), h);
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..i {
            kyy += rbf_kernel(y.row(i), y.row(j), h);
        }
    }
    let mut kxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            kxy += rbf_kernel(x.row(i), y.row(j), h);
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    Ok(2.0 * kxx / (mf * (mf - 1.0)) + 2.0 * kyy / (nf * (nf - 1.0)) - 2.0 * kxy / (mf * nf))
}

/// MMD estimates under random relabelling of the pooled sample, with the
/// bandwidth fixed to the one used for the observed statistic.
pub fn mmd_permutation_null(
    x: &Tensor,
    y: &Tensor,
    bandwidth: Bandwidth,
    permutations: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    check(x, y)?;
    let h = resolve(bandwidth, x, y)?;
    let (m, n) = (x.rows(), y.rows());
    let total = m + n;
    let row = |i: usize| if i < m { x.row(i) } else { y.row(i - m) };
    let mut k = alloc::vec![0.0; total * total];
    for i in 0..total {
        for j in 0..i {
            let v = rbf_kernel(row(i), row(j), h);
            k[i * total + j] = v;
            k[j * total + i] = v;
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    let mut idx: Vec<usize> = (0..total).collect();
    let mut in_x = alloc::vec![false; total];
    let mut out = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        rng.shuffle(&mut idx);
        for (pos, &i) in idx.iter().enumerate() {
            in_x[i] = pos < m;
        }
        let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
        for i in 0..total {
            for j in 0..i {
                let v = k[i * total + j];
                match (in_x[i], in_x[j]) {
                    (true, true) => kxx += v,
                    (false, false) => kyy += v,
                    _ => kxy += v,
                }
            }
        }
        out.push(2.0 * kxx / (mf * (mf - 1.0)) + 2.0 * kyy / (nf * (nf - 1.0)) - 2.0 * kxy / (mf * nf));
    }
    Ok(out)
}
