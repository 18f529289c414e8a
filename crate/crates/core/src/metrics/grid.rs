use alloc::vec::Vec;

use num_traits::Float;

use super::log_sum_exp;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::gauss;
use crate::models::EnergyFunction;

/// Rows evaluated per call when sweeping a grid.
const CHUNK_ROWS: usize = 4096;

/// Tensor-product grid of evenly spaced points, last dimension fastest.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() != points.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "grid bounds/points disagree: {} {} {}",
                lower.len(),
                upper.len(),
                points.len()
            )));
        }
        for d in 0..lower.len() {
            if !(upper[d] > lower[d]) || points[d] < 16 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "grid axis {d}: need upper > lower and >= 16 points"
                )));
            }
        }
        Ok(Self { lower, upper, points })
    }

    /// Same bounds and point count on every axis.
    pub fn square(dim: usize, lo: f64, hi: f64, points: usize) -> Result<Self> {
        Self::new(alloc::vec![lo; dim], alloc::vec![hi; dim], alloc::vec![points; dim])
    }

    /// `[-8, 8]` with 801 points per axis.
    pub fn standard(dim: usize) -> Self {
        Self::square(dim, -8.0, 8.0, 801).expect("valid grid")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn step(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / (self.points[d] - 1) as f64
    }

    pub fn axis(&self, d: usize) -> Vec<f64> {
        let h = self.step(d);
        (0..self.points[d]).map(|i| self.lower[d] + i as f64 * h).collect()
    }

    fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for d in (0..self.dim()).rev() {
            out[d] = flat % self.points[d];
            flat /= self.points[d];
        }
    }

    /// Coordinates of the point with flat index `flat`.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut idx = alloc::vec![0; self.dim()];
        self.multi_index(flat, &mut idx);
        idx.iter()
            .enumerate()
            .map(|(d, &i)| self.lower[d] + i as f64 * self.step(d))
            .collect()
    }

    /// Log of the trapezoid weight (cell volume, halved per boundary axis).
    pub fn log_weight(&self, flat: usize) -> f64 {
        let mut idx = alloc::vec![0; self.dim()];
        self.multi_index(flat, &mut idx);
        idx.iter()
            .enumerate()
            .map(|(d, &i)| {
                let w = if i == 0 || i + 1 == self.points[d] { 0.5 } else { 1.0 };
                (w * self.step(d)).ln()
            })
            .sum()
    }

    /// Points `[start, end)` as a `[end - start, dim]` tensor.
    pub fn chunk(&self, start: usize, end: usize) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity((end - start) * d);
        for i in start..end {
            data.extend(self.point(i));
        }
        Tensor::from_vec(&[end - start, d], data).expect("grid chunk shape")
    }

    /// Calls `f` on consecutive chunks covering the whole grid.
    pub fn for_each_chunk(&self, mut f: impl FnMut(usize, &Tensor) -> Result<()>) -> Result<()> {
        let n = self.len();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK_ROWS).min(n);
            f(start, &self.chunk(start, end))?;
            start = end;
        }
        Ok(())
    }

    /// Evaluates a row-wise function over the whole grid.
    pub fn evaluate(&self, mut f: impl FnMut(&Tensor) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        self.for_each_chunk(|_, pts| {
            let v = f(pts)?;
            if v.len() != pts.rows() {
                return Err(Error::DimensionMismatch {
                    expected: pts.rows(),
                    got: v.len(),
                });
            }
            out.extend(v);
            Ok(())
        })?;
        Ok(out)
    }

    /// `log ∫ exp(v)` by the trapezoid rule from grid values `v`.
    pub fn log_integral(&self, log_values: &[f64]) -> f64 {
        let terms: Vec<f64> = log_values
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.log_weight(i))
            .collect();
        log_sum_exp(&terms)
    }

    /// Self-normalised trapezoid weights of the density `exp(log_values)`.
    pub fn normalized_weights(&self, log_values: &[f64]) -> Vec<f64> {
        let terms: Vec<f64> = log_values
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.log_weight(i))
            .collect();
        let lz = log_sum_exp(&terms);
        terms.iter().map(|t| (t - lz).exp()).collect()
    }
}

fn check_quadrature_dim(grid: &GridSpec, nz: usize) -> Result<()> {
    if grid.dim() > 3 {
        return Err(Error::InvalidConfig(alloc::format!(
            "quadrature supports at most 3 dimensions, got {}",
            grid.dim()
        )));
    }
    if grid.dim() != nz {
        return Err(Error::DimensionMismatch {
            expected: nz,
            got: grid.dim(),
        });
    }
    Ok(())
}

/// `log ∫ exp(log_f(z)) dz` over the grid.
pub fn quadrature_log_integral(grid: &GridSpec, log_f: impl FnMut(&Tensor) -> Result<Vec<f64>>) -> Result<f64> {
    if grid.dim() > 3 {
        return Err(Error::InvalidConfig(alloc::format!(
            "quadrature supports at most 3 dimensions, got {}",
            grid.dim()
        )));
    }
    Ok(grid.log_integral(&grid.evaluate(log_f)?))
}

/// Grid log-values of the unnormalised tilted density `exp(-f(z)) N(z; 0, I)`.
pub fn tilted_log_density(f: &EnergyFunction, grid: &GridSpec) -> Result<Vec<f64>> {
    check_quadrature_dim(grid, f.nz())?;
    grid.evaluate(|pts| {
        let e = f.evaluate(pts)?;
        Ok(gauss::standard_log_pdf_rows(pts)
            .into_iter()
            .zip(e)
            .map(|(l, e)| l - e)
            .collect())
    })
}

/// `log Z = log ∫ exp(-f(z)) N(z; 0, I) dz` by trapezoid quadrature.
pub fn quadrature_log_z(f: &EnergyFunction, grid: &GridSpec) -> Result<f64> {
    Ok(grid.log_integral(&tilted_log_density(f, grid)?))
}

/// Mean of the tilted density, by quadrature.
pub fn quadrature_tilted_mean(f: &EnergyFunction, grid: &GridSpec) -> Result<Vec<f64>> {
    let w = grid.normalized_weights(&tilted_log_density(f, grid)?);
    let mut mean = alloc::vec![0.0; grid.dim()];
    for (i, wi) in w.iter().enumerate() {
        for (m, p) in mean.iter_mut().zip(grid.point(i)) {
            *m += wi * p;
        }
    }
    Ok(mean)
}

/// Row-major 2-D grid of log-density values.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub grid: GridSpec,
    pub log_density: Vec<f64>,
}

impl DensityGrid {
    /// Trapezoid integral of the density over the grid.
    pub fn mass(&self) -> f64 {
        self.grid.log_integral(&self.log_density).exp()
    }

    /// Index of the largest value.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.log_density.iter().enumerate() {
            if *v > self.log_density[best] {
                best = i;
            }
        }
        best
    }

    /// `(x, y, log_density)` triples in grid order.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.log_density.iter().enumerate().map(|(i, v)| {
            let p = self.grid.point(i);
            (p[0], p[1], *v)
        })
    }
}

/// Evaluates `log_density` on a 2-D grid.
pub fn density_grid(grid: &GridSpec, log_density: impl FnMut(&Tensor) -> Result<Vec<f64>>) -> Result<DensityGrid> {
    if grid.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: grid.dim(),
        });
    }
    Ok(DensityGrid {
        grid: grid.clone(),
        log_density: grid.evaluate(log_density)?,
    })
}

/// Total-variation distance between two grid densities, each normalised
/// over the grid first.
pub fn total_variation(grid: &GridSpec, log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != grid.len() || log_q.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: log_p.len().min(log_q.len()),
        });
    }
    let wp = grid.normalized_weights(log_p);
    let wq = grid.normalized_weights(log_q);
    Ok(0.5 * wp.iter().zip(&wq).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Gaussian kernel density estimate at `points`, bandwidth by Scott's rule
/// unless given.
pub fn kde_log_density(samples: &Tensor, points: &Tensor, bandwidth: Option<f64>) -> Result<Vec<f64>> {
    let d = samples.cols();
    if points.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: points.cols(),
        });
    }
    let n = samples.rows();
    if n == 0 {
        return Err(Error::Empty("kde samples"));
    }
    let h = match bandwidth {
        Some(h) => h,
        None => {
            let mean = samples.column_means();
            let mut var = 0.0;
            for r in 0..n {
                for (v, m) in samples.row(r).iter().zip(&mean) {
                    var += (v - m) * (v - m);
                }
            }
            let sigma = (var / (n * d) as f64).sqrt();
            sigma * (n as f64).powf(-1.0 / (d as f64 + 4.0))
        }
    };
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "kde bandwidth must be positive, got {h}"
        )));
    }
    let norm = -(n as f64).ln() - 0.5 * d as f64 * (gauss::LN_2PI + 2.0 * h.ln());
    let mut terms = alloc::vec![0.0; n];
    Ok((0..points.rows())
        .map(|q| {
            let p = points.row(q);
            for (t, r) in terms.iter_mut().zip(0..n) {
                let s: f64 = samples.row(r).iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                *t = -0.5 * s / (h * h);
            }
            log_sum_exp(&terms) + norm
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FlowSpec;
    use crate::models::{Activation, FlowSampler, Mlp, MlpSpec};
    use crate::rng::SeededRng;

    #[test]
    fn flat_energy_has_zero_log_z() {
        let f = EnergyFunction::constant(2, 4, 0.0);
        let lz = quadrature_log_z(&f, &GridSpec::standard(2)).unwrap();
        assert!(lz.abs() < 1e-8, "{lz}");
    }

    #[test]
    fn linear_tilt_log_z() {
        // f(z) = -a.z gives log Z = |a|^2 / 2
        let f = EnergyFunction::linear(&[-1.0, 0.0], 0.0);
        let lz = quadrature_log_z(&f, &GridSpec::standard(2)).unwrap();
        assert!((lz - 0.5).abs() < 1e-6, "{lz}");
        let mean = quadrature_tilted_mean(&f, &GridSpec::square(2, -8.0, 8.0, 201).unwrap()).unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-8 && mean[1].abs() < 1e-8);
    }

    #[test]
    fn grid_refinement_converged() {
        // smooth energy; piecewise-linear ones only converge at second order
        let mut rng = SeededRng::new(0);
        let spec = MlpSpec::with_hidden(2, &[8, 8], 1, Activation::Tanh).unwrap();
        let f = EnergyFunction::from_mlp(Mlp::new(spec, &mut rng)).unwrap();
        let coarse = quadrature_log_z(&f, &GridSpec::square(2, -8.0, 8.0, 401).unwrap()).unwrap();
        let fine = quadrature_log_z(&f, &GridSpec::standard(2)).unwrap();
        assert!((coarse - fine).abs() < 1e-8, "{coarse} {fine}");
    }

    #[test]
    fn widening_bounds_changes_nothing() {
        let mut rng = SeededRng::new(1);
        let f = EnergyFunction::new(2, 8, &mut rng);
        let a = quadrature_log_z(&f, &GridSpec::square(2, -8.0, 8.0, 321).unwrap()).unwrap();
        let b = quadrature_log_z(&f, &GridSpec::square(2, -10.0, 10.0, 401).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} {b}");
    }

    #[test]
    fn rejects_high_dimensional_quadrature() {
        let f = EnergyFunction::constant(4, 4, 0.0);
        assert!(quadrature_log_z(&f, &GridSpec::square(4, -1.0, 1.0, 16).unwrap()).is_err());
        assert!(GridSpec::square(2, -1.0, 1.0, 15).is_err());
        assert!(GridSpec::square(2, 1.0, 1.0, 20).is_err());
    }

    #[test]
    fn standard_normal_grid_peaks_at_origin() {
        let grid = GridSpec::square(2, -3.0, 3.0, 61).unwrap();
        let dg = density_grid(&grid, |p| Ok(gauss::standard_log_pdf_rows(p))).unwrap();
        let p = grid.point(dg.argmax());
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn normalised_tilted_grid_has_unit_mass() {
        let mut rng = SeededRng::new(2);
        let f = EnergyFunction::new(2, 8, &mut rng);
        let grid = GridSpec::square(2, -8.0, 8.0, 201).unwrap();
        let lz = quadrature_log_z(&f, &grid).unwrap();
        let dg = density_grid(&grid, |p| {
            let e = f.evaluate(p)?;
            Ok(gauss::standard_log_pdf_rows(p)
                .iter()
                .zip(e)
                .map(|(l, e)| l - e - lz)
                .collect())
        })
        .unwrap();
        assert!((dg.mass() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn identity_flow_grid_is_standard_normal() {
        let mut rng = SeededRng::new(3);
        let flow = FlowSampler::new(
            FlowSpec {
                nz: 2,
                hidden: 8,
                layers: 2,
            },
            &mut rng,
        );
        let grid = GridSpec::square(2, -4.0, 4.0, 41).unwrap();
        let a = density_grid(&grid, |p| flow.log_pdf_values(p)).unwrap();
        let b = density_grid(&grid, |p| Ok(gauss::standard_log_pdf_rows(p))).unwrap();
        for (x, y) in a.log_density.iter().zip(&b.log_density) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn total_variation_bounds() {
        let grid = GridSpec::square(2, -6.0, 6.0, 121).unwrap();
        let p = grid.evaluate(|x| Ok(gauss::standard_log_pdf_rows(x))).unwrap();
        assert!(total_variation(&grid, &p, &p).unwrap() < 1e-15);
        let far = grid
            .evaluate(|x| Ok(gauss::standard_log_pdf_rows(&x.map(|v| (v - 5.0) * 3.0))))
            .unwrap();
        assert!(total_variation(&grid, &p, &far).unwrap() > 0.9);
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = SeededRng::new(4);
        let samples = rng.normal_tensor(200, 2);
        let grid = GridSpec::square(2, -7.0, 7.0, 141).unwrap();
        let v = grid.evaluate(|p| kde_log_density(&samples, p, None)).unwrap();
        assert!((grid.log_integral(&v)).abs() < 1e-3);
    }
}
