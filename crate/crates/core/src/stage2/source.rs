use alloc::vec::Vec;

use crate::data::Dataset;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::models::VaeModel;
use crate::rng::SeededRng;
use crate::stage1::aggregate_posterior_sample;

/// Where stage 2 draws its "real" latents from.
pub trait LatentSource {
    fn nz(&self) -> usize;
    fn sample(&mut self, n: usize, rng: &mut SeededRng) -> Result<Tensor>;
}

/// Fresh draws from a trained encoder's aggregate posterior.
#[derive(Debug, Clone, Copy)]
pub struct AggregatePosterior<'a> {
    pub model: &'a VaeModel,
    pub data: &'a Dataset,
}

impl LatentSource for AggregatePosterior<'_> {
    fn nz(&self) -> usize {
        self.model.nz()
    }

    fn sample(&mut self, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        aggregate_posterior_sample(self.model, self.data, n, rng)
    }
}

/// `N(mean, std^2 I)`; a stand-in aggregate posterior with known density.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSource {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianSource {
    pub fn standard(nz: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; nz],
            std: 1.0,
        }
    }
}

impl LatentSource for GaussianSource {
    fn nz(&self) -> usize {
        self.mean.len()
    }

    fn sample(&mut self, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let d = self.mean.len();
        let mut t = rng.normal_tensor(n, d);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = self.mean[i % d] + self.std * *v;
        }
        Ok(t)
    }
}

/// A fixed latent set resampled with replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedLatents {
    latents: Tensor,
}

impl CachedLatents {
    pub fn new(latents: Tensor) -> Result<Self> {
        if latents.rows() == 0 {
            return Err(Error::Empty("latent cache"));
        }
        Ok(Self { latents })
    }

    pub fn latents(&self) -> &Tensor {
        &self.latents
    }
}

impl LatentSource for CachedLatents {
    fn nz(&self) -> usize {
        self.latents.cols()
    }

    fn sample(&mut self, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let idx: Vec<usize> = (0..n).map(|_| rng.below(self.latents.rows())).collect();
        Ok(self.latents.select_rows(&idx))
    }
}
