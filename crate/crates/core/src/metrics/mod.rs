//! Sample-based distances, grid quadrature and neighbour search.

mod frechet;
mod grid;
mod mmd;
mod pca;

pub use frechet::{frechet_from_moments, frechet_gaussian, mean_covariance, FrechetDistance, COVARIANCE_RIDGE};
pub use grid::{
    density_grid, kde_log_density, quadrature_log_integral, quadrature_log_z, quadrature_tilted_mean,
    tilted_log_density, total_variation, DensityGrid, GridSpec,
};
pub use mmd::{median_distance, mmd_permutation_null, mmd_rbf, rbf_kernel, Bandwidth};
pub use pca::{nearest_neighbors, pca_fit, Pca};

use num_traits::Float;

/// `log(sum(exp(v)))`, `-inf` for an empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
