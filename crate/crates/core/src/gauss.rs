//! Diagonal Gaussians: densities, KL to the standard normal and
//! reparameterised sampling, in plain and graph form.

use alloc::vec::Vec;

use num_traits::Float;

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    logvar: Vec<f64>,
}

impl DiagGaussian {
    /// Log-variances are clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: logvar.len(),
            });
        }
        if mu.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "gaussian parameters",
            });
        }
        let logvar = logvar.into_iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
        Ok(Self { mu, logvar })
    }

    /// N(0, I) of dimension `d`.
    pub fn standard(d: usize) -> Self {
        Self {
            mu: alloc::vec![0.0; d],
            logvar: alloc::vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: n,
            })
        }
    }

    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z.len())?;
        let quad: f64 = z
            .iter()
            .zip(&self.mu)
            .zip(&self.logvar)
            .map(|((z, m), lv)| (z - m) * (z - m) * (-lv).exp() + lv)
            .sum();
        Ok(-0.5 * (quad + self.dim() as f64 * LN_2PI))
    }

    /// KL(self || N(0, I)) in closed form.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.logvar)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>()
    }

    /// `mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(eps.len())?;
        Ok(self
            .mu
            .iter()
            .zip(&self.logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.normal()).collect();
        self.reparameterize(&eps).expect("dimension matches")
    }
}

/// Row-wise log N(z; 0, I).
pub fn standard_log_pdf_rows(z: &Tensor) -> Vec<f64> {
    let d = z.cols() as f64;
    (0..z.rows())
        .map(|r| -0.5 * (z.row(r).iter().map(|v| v * v).sum::<f64>() + d * LN_2PI))
        .collect()
}

/// Graph form of row-wise log N(z; 0, I), shape `[B, 1]`.
pub fn standard_log_pdf(g: &mut Graph, z: Var) -> Var {
    let d = g.value(z).cols() as f64;
    let sq = g.square(z);
    let s = g.sum_rows(sq);
    let s = g.scale(s, -0.5);
    g.add_scalar(s, -0.5 * d * LN_2PI)
}

/// Graph form of row-wise KL(N(mu, exp(logvar)) || N(0, I)), shape `[B, 1]`.
pub fn kl_to_standard_rows(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let var = g.exp(logvar);
    let mu2 = g.square(mu);
    let a = g.add(var, mu2)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_rows(c);
    Ok(g.scale(s, 0.5))
}

/// Graph form of `mu + exp(logvar / 2) * eps`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}
