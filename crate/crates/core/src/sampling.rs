//! Generation: one-pass flow sampling, energy-weighted importance
//! resampling of flow proposals, and decoding to data space.

use alloc::vec::Vec;

use num_traits::Float;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::gauss;
use crate::metrics::log_sum_exp;
use crate::models::{EnergyFunction, FlowSampler, VaeModel};
use crate::rng::SeededRng;

/// Importance weights used by [`sample_sir`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WeightMode {
    /// `w ∝ exp(-f(z))`: the target density written with the proposal
    /// density in place of the base Gaussian.
    #[default]
    PaperLiteral,
    /// `w ∝ exp(-f(z)) N(z; 0, I) / p_g(z)`: target is the tilted Gaussian.
    TiltedBase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SirConfig {
    /// Proposals per output sample (M).
    pub proposals: usize,
    /// Extra proposals for the normaliser estimate (N).
    pub normalizer_samples: usize,
    pub weight_mode: WeightMode,
    pub seed: u64,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            proposals: 500,
            normalizer_samples: 500,
            weight_mode: WeightMode::PaperLiteral,
            seed: 0,
        }
    }
}

impl SirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proposals == 0 || self.normalizer_samples == 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "sir needs proposals >= 1 and normalizer_samples >= 1, got {} and {}",
                self.proposals,
                self.normalizer_samples
            )));
        }
        Ok(())
    }
}

/// Network evaluations per generated sample. `forward()` and `backward()`
/// give the combined pass counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NfeCounter {
    pub flow_forward: usize,
    pub energy_forward: usize,
    pub backward: usize,
}

impl NfeCounter {
    pub fn forward(&self) -> usize {
        self.flow_forward + self.energy_forward
    }

    pub fn backward(&self) -> usize {
        self.backward
    }
}

/// `m` draws of `g(eps)`.
pub fn sample_fast(flow: &FlowSampler, m: usize, rng: &mut SeededRng) -> Result<(Tensor, NfeCounter)> {
    let nfe = NfeCounter {
        flow_forward: 1,
        ..NfeCounter::default()
    };
    if m == 0 {
        return Ok((Tensor::zeros(&[0, flow.nz()]), nfe));
    }
    let (z, _) = flow.forward_values(&rng.normal_tensor(m, flow.nz()))?;
    Ok((z, nfe))
}

/// One resampled latent with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SirDraw {
    pub z: Vec<f64>,
    /// Index of the chosen proposal.
    pub index: usize,
    /// Normalised log-weights of the proposals.
    pub log_weights: Vec<f64>,
    /// Log of the normaliser estimate from the extra proposals.
    pub log_z_hat: f64,
    pub nfe: NfeCounter,
}

/// Log importance weights (unnormalised) of flow proposals.
fn log_weights(f: &EnergyFunction, eps: &Tensor, z: &Tensor, logdet: &[f64], mode: WeightMode) -> Result<Vec<f64>> {
    let e = f.evaluate(z)?;
    Ok(match mode {
        WeightMode::PaperLiteral => e.iter().map(|v| -v).collect(),
        WeightMode::TiltedBase => {
            let lb = gauss::standard_log_pdf_rows(eps);
            let l0 = gauss::standard_log_pdf_rows(z);
            (0..e.len()).map(|i| -e[i] + l0[i] - (lb[i] - logdet[i])).collect()
        }
    })
}

/// Picks an index with probability `exp(log_w)` (already normalised).
fn categorical(log_w: &[f64], rng: &mut SeededRng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, lw) in log_w.iter().enumerate() {
        acc += lw.exp();
        if u < acc {
            return i;
        }
    }
    log_w.len() - 1
}

/// Energy-guided importance resampling: draw `M` flow proposals, weight
/// them, and return one chosen by the normalised weights.
pub fn sample_sir(f: &EnergyFunction, flow: &FlowSampler, cfg: &SirConfig, rng: &mut SeededRng) -> Result<SirDraw> {
    cfg.validate()?;
    if f.nz() != flow.nz() {
        return Err(Error::DimensionMismatch {
            expected: flow.nz(),
            got: f.nz(),
        });
    }
    let nz = flow.nz();
    let (m, n) = (cfg.proposals, cfg.normalizer_samples);
    let eps = rng.normal_tensor(m + n, nz);
    let (z, logdet) = flow.forward_values(&eps)?;
    let lw_all = log_weights(f, &eps, &z, &logdet, cfg.weight_mode)?;
    let (lw, lz) = lw_all.split_at(m);
    let log_z_hat = log_sum_exp(lz) - (n as f64).ln();
    let norm = log_sum_exp(lw);
    if !norm.is_finite() {
        return Err(Error::NonFinite { context: "sir weights" });
    }
    let log_weights: Vec<f64> = lw.iter().map(|v| v - norm).collect();
    let index = categorical(&log_weights, rng);
    Ok(SirDraw {
        z: z.row(index).to_vec(),
        index,
        log_weights,
        log_z_hat,
        nfe: NfeCounter {
            flow_forward: m + n,
            energy_forward: m + n,
            backward: 0,
        },
    })
}

/// `count` independent SIR draws, each with its own proposal sets. The
/// counter is per generated sample.
pub fn sample_sir_batch(
    f: &EnergyFunction,
    flow: &FlowSampler,
    count: usize,
    cfg: &SirConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, NfeCounter)> {
    cfg.validate()?;
    let mut data = Vec::with_capacity(count * flow.nz());
    let mut nfe = NfeCounter::default();
    for _ in 0..count {
        let d = sample_sir(f, flow, cfg, rng)?;
        data.extend_from_slice(&d.z);
        nfe = d.nfe;
    }
    Ok((Tensor::from_vec(&[count, flow.nz()], data)?, nfe))
}

/// Decoder mean of each latent.
pub fn generate(vae: &VaeModel, latents: &Tensor) -> Result<Tensor> {
    vae.decode_mean(latents)
}
