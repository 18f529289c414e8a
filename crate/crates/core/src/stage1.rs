//! First stage: fit the VAE by maximising the (KL-weighted) ELBO, then read
//! aggregate-posterior samples off the trained encoder.

use alloc::format;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::diff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gauss;
use crate::models::{Activation, BoundVae, ObservationModel, Parameterized, VaeModel, VaeSpec};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage1Config {
    pub nz: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub observation: ObservationModel,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight on the KL term; 1 is the plain ELBO.
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            nz: 2,
            hidden: alloc::vec![64, 64],
            activation: Activation::LeakyRelu,
            observation: ObservationModel::GaussianFixed,
            epochs: 200,
            batch_size: 100,
            learning_rate: 1e-3,
            kl_weight: 1.0,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("stage1: {msg}")));
        if self.nz == 0 {
            return bad("nz must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return bad("kl_weight must be finite and non-negative");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn vae_spec(&self, data_dim: usize) -> VaeSpec {
        VaeSpec {
            data_dim,
            nz: self.nz,
            hidden: self.hidden.clone(),
            activation: self.activation,
            observation: self.observation,
        }
    }
}

/// Graph handles of the batch-averaged loss pieces.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// `-(recon - kl_weight * kl)`, the quantity minimised.
    pub total: Var,
    /// Mean `log p(x|z)`.
    pub recon: Var,
    /// Mean `KL(q(z|x) || N(0, I))`.
    pub kl: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ElboValues {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Builds the negative weighted ELBO for batch `x` using noise `eps`
/// (one row per row of `x`).
pub fn elbo_terms(g: &mut Graph, vae: &BoundVae, x: Var, eps: Var, kl_weight: f64) -> Result<ElboTerms> {
    if !(kl_weight >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "kl_weight must be non-negative, got {kl_weight}"
        )));
    }
    let (mu, lv) = vae.encode(g, x)?;
    if g.shape(eps) != g.shape(mu) {
        return Err(Error::ShapeMismatch {
            op: "elbo eps",
            left: g.shape(mu).to_vec(),
            right: g.shape(eps).to_vec(),
        });
    }
    let z = gauss::reparameterize(g, mu, lv, eps)?;
    let ll = vae.log_likelihood(g, x, z)?;
    let recon = g.mean(ll);
    let kl_rows = gauss::kl_to_standard_rows(g, mu, lv)?;
    let kl = g.mean(kl_rows);
    let weighted = g.scale(kl, kl_weight);
    let elbo = g.sub(recon, weighted)?;
    let total = g.neg(elbo);
    Ok(ElboTerms { total, recon, kl })
}

/// Value form of [`elbo_terms`].
pub fn elbo_loss(model: &VaeModel, x: &Tensor, kl_weight: f64, eps: &Tensor) -> Result<ElboValues> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let ev = g.constant(eps.clone());
    let t = elbo_terms(&mut g, &b, xv, ev, kl_weight)?;
    let out = ElboValues {
        total: g.scalar(t.total),
        recon: g.scalar(t.recon),
        kl: g.scalar(t.kl),
    };
    if !(out.total.is_finite() && out.recon.is_finite() && out.kl.is_finite()) {
        return Err(Error::NonFinite { context: "elbo" });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Run {
    pub model: VaeModel,
    pub history: Vec<EpochLoss>,
}

/// Initialises a model from `cfg.seed` and trains it.
pub fn train_vae(data: &Dataset, cfg: &Stage1Config) -> Result<Stage1Run> {
    cfg.validate()?;
    let mut rng = SeededRng::derive(cfg.seed, 0);
    let mut model = VaeModel::new(cfg.vae_spec(data.dim()), &mut rng)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    fit_vae(&mut model, data, cfg, &mut history)?;
    Ok(Stage1Run { model, history })
}

/// Trains `model` in place, appending one record per epoch.
///
/// On a non-finite loss or gradient the model is rolled back to its state
/// at the end of the last complete epoch and `Error::Diverged` is returned.
pub fn fit_vae(model: &mut VaeModel, data: &Dataset, cfg: &Stage1Config, history: &mut Vec<EpochLoss>) -> Result<()> {
    cfg.validate()?;
    if data.dim() != model.spec().data_dim {
        return Err(Error::DimensionMismatch {
            expected: model.spec().data_dim,
            got: data.dim(),
        });
    }
    let mut adam = Adam::new(
        AdamConfig::standard(cfg.learning_rate),
        model.named_parameters().into_iter().map(|(_, t)| t),
    );
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        let mut rng = SeededRng::derive(cfg.seed, epoch as u64 + 1);
        rng.shuffle(&mut order);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.batch(chunk);
            let eps = rng.normal_tensor(chunk.len(), model.nz());
            let mut g = Graph::new();
            let b = model.bind(&mut g, true);
            let xv = g.constant(x);
            let ev = g.constant(eps);
            let t = elbo_terms(&mut g, &b, xv, ev, cfg.kl_weight)?;
            let vals = [g.scalar(t.total), g.scalar(t.recon), g.scalar(t.kl)];
            let diverged = |detail| {
                Err(Error::Diverged {
                    iteration: step,
                    detail,
                })
            };
            if vals.iter().any(|v| !v.is_finite()) {
                *model = last_good;
                return diverged(format!("non-finite loss in epoch {epoch}: {vals:?}"));
            }
            g.backward(t.total)?;
            let grads: Vec<Tensor> = b.vars().iter().map(|&v| g.grad_tensor(v)).collect();
            if let Err(e) = adam.step(model.parameters_mut(), &grads) {
                *model = last_good;
                return diverged(format!("rejected update in epoch {epoch}: {e}"));
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            batches += 1;
            step += 1;
        }
        let k = batches as f64;
        history.push(EpochLoss {
            epoch,
            total: sums[0] / k,
            recon: sums[1] / k,
            kl: sums[2] / k,
        });
    }
    Ok(())
}

/// Draws `n` latents from the aggregate posterior: a uniformly chosen data
/// row, then `z ~ q(z|x)`.
pub fn aggregate_posterior_sample(model: &VaeModel, data: &Dataset, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Empty("aggregate posterior sample count"));
    }
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.below(data.len())).collect();
    let (mu, lv) = model.encode_values(&data.batch(&idx))?;
    let eps = rng.normal_tensor(n, model.nz());
    let mut out = mu.clone();
    for ((o, l), e) in out.data_mut().iter_mut().zip(lv.data()).zip(eps.data()) {
        *o += libm::exp(0.5 * l) * e;
    }
    Ok(out)
}
