use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use super::objective::{critic_objective, sampler_objective, ObjectiveTerms};
use super::source::{AggregatePosterior, CachedLatents, LatentSource};
use crate::data::Dataset;
use crate::diff::{Adam, AdamConfig, Graph, Tensor};
use crate::error::{Error, Result};
use crate::models::{EnergyFunction, FlowSampler, FlowSpec, Parameterized, VaeModel};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage2Config {
    /// Gradient-penalty weight.
    pub lambda_gp: f64,
    /// Critic updates per sampler update.
    pub critic_steps_per_sampler: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Aggregate-posterior samples that make up one epoch of critic
    /// batches; `None` uses the dataset size.
    pub samples_per_epoch: Option<usize>,
    pub lr_energy: f64,
    pub lr_sampler: f64,
    /// Adam moment decay rates of the critic and sampler optimisers.
    pub adam_betas: (f64, f64),
    /// Learning rate of the maximum-likelihood latent-flow and
    /// density-ratio baselines.
    pub lr_baseline: f64,
    /// Energy hidden width.
    pub energy_hidden: usize,
    /// Coupling-network hidden width.
    pub flow_hidden: usize,
    pub flow_layers: usize,
    /// Draw critic batches from a fixed set of this many aggregate-posterior
    /// latents instead of fresh encoder samples.
    pub latent_cache: Option<usize>,
    /// Abort once `|E_q f|` or `|E_g f|` exceeds this.
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            critic_steps_per_sampler: 5,
            epochs: 150,
            batch_size: 100,
            samples_per_epoch: None,
            lr_energy: 2e-4,
            lr_sampler: 2e-4,
            adam_betas: (0.5, 0.9),
            lr_baseline: 1e-3,
            energy_hidden: 64,
            flow_hidden: 64,
            flow_layers: 4,
            latent_cache: None,
            divergence_threshold: 1e6,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("stage2: {msg}")));
        if !(self.lambda_gp > 0.0) {
            return bad("lambda_gp must be positive");
        }
        if self.critic_steps_per_sampler == 0 {
            return bad("critic_steps_per_sampler must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.samples_per_epoch == Some(0) || self.latent_cache == Some(0) {
            return bad("samples_per_epoch and latent_cache must be positive when set");
        }
        if !(self.lr_energy > 0.0 && self.lr_sampler > 0.0 && self.lr_baseline > 0.0) {
            return bad("learning rates must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam_betas must lie in [0, 1)");
        }
        if self.energy_hidden == 0 || self.flow_hidden == 0 || self.flow_layers == 0 {
            return bad("network sizes must be positive");
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive");
        }
        Ok(())
    }

    pub fn flow_spec(&self, nz: usize) -> FlowSpec {
        FlowSpec {
            nz,
            hidden: self.flow_hidden,
            layers: self.flow_layers,
        }
    }

    fn adversarial_adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            ..AdamConfig::adversarial(lr)
        }
    }

    fn critic_steps_per_epoch(&self, default_samples: usize) -> usize {
        self.samples_per_epoch
            .unwrap_or(default_samples)
            .div_ceil(self.batch_size)
            .max(1)
    }

    /// Sampler updates over the whole run: each epoch feeds
    /// `ceil(samples / batch)` critic batches, grouped `k` per sampler step.
    pub fn sampler_iterations(&self, default_samples: usize) -> usize {
        (self.epochs * self.critic_steps_per_epoch(default_samples) / self.critic_steps_per_sampler).max(1)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UpdateCounters {
    pub critic: usize,
    pub sampler: usize,
}

#[derive(Debug, Clone)]
pub struct Stage2Run {
    pub energy: EnergyFunction,
    pub flow: FlowSampler,
    pub history: Vec<ObjectiveTerms>,
    pub counters: UpdateCounters,
}

/// Learns the tilted prior on a trained VAE's aggregate posterior. An epoch
/// is one dataset's worth of latents unless `samples_per_epoch` is set.
pub fn train_prior(vae: &VaeModel, data: &Dataset, cfg: &Stage2Config) -> Result<Stage2Run> {
    let mut fresh = AggregatePosterior { model: vae, data };
    let default_samples = data.len();
    match cfg.latent_cache {
        None => train_prior_on(&mut fresh, default_samples, cfg),
        Some(n) => {
            let mut rng = SeededRng::derive(cfg.seed, u64::MAX);
            let mut cache = CachedLatents::new(fresh.sample(n, &mut rng)?)?;
            train_prior_on(&mut cache, default_samples, cfg)
        }
    }
}

fn initial_energy(nz: usize, cfg: &Stage2Config, rng: &mut SeededRng) -> EnergyFunction {
    // zero output layer: the prior starts at p_0, matching the identity flow
    let mut energy = EnergyFunction::new(nz, cfg.energy_hidden, rng);
    energy.mlp_mut().zero_output_layer();
    energy
}

/// Alternating optimisation against any latent source: per iteration, `k`
/// critic updates on fresh batches then one sampler update.
pub fn train_prior_on(source: &mut dyn LatentSource, default_samples: usize, cfg: &Stage2Config) -> Result<Stage2Run> {
    cfg.validate()?;
    let nz = source.nz();
    let b = cfg.batch_size;
    let mut rng = SeededRng::derive(cfg.seed, 0);
    let mut energy = initial_energy(nz, cfg, &mut rng);
    let mut flow = FlowSampler::new(cfg.flow_spec(nz), &mut rng);
    flow.init_normalization_from_base(&rng.normal_tensor(b.max(2), nz))?;

    let mut adam_f = Adam::new(
        cfg.adversarial_adam(cfg.lr_energy),
        energy.named_parameters().into_iter().map(|(_, t)| t),
    );
    let mut adam_g = Adam::new(cfg.adversarial_adam(cfg.lr_sampler), flow.trainable_parameters());
    let iterations = cfg.sampler_iterations(default_samples);
    let mut history = Vec::with_capacity(iterations);
    let mut counters = UpdateCounters::default();

    for it in 0..iterations {
        let mut rng = SeededRng::derive(cfg.seed, it as u64 + 1);
        let mut last = (0.0, 0.0);
        for _ in 0..cfg.critic_steps_per_sampler {
            let z_q = source.sample(b, &mut rng)?;
            let (z_g, _) = flow.forward_values(&rng.normal_tensor(b, nz))?;
            let u = Tensor::from_vec(&[b, 1], (0..b).map(|_| rng.uniform()).collect())?;
            let mut g = Graph::new();
            let fb = energy.bind(&mut g, true);
            let t = critic_objective(&mut g, &fb, &z_q, &z_g, &u, cfg.lambda_gp)?;
            let (eq, eg) = (g.scalar(t.e_q_f), g.scalar(t.e_g_f));
            if !(eq.abs() <= cfg.divergence_threshold && eg.abs() <= cfg.divergence_threshold) {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: format!("critic expectations E_q f = {eq}, E_g f = {eg}"),
                });
            }
            g.backward(t.loss)?;
            let grads: Vec<Tensor> = fb.vars().iter().map(|&v| g.grad_tensor(v)).collect();
            adam_f.step(energy.parameters_mut(), &grads)?;
            counters.critic += 1;
            last = (eq, g.scalar(t.gp));
        }

        let mut g = Graph::new();
        let fb = energy.bind(&mut g, false);
        let gb = flow.bind(&mut g, true);
        let eps = g.constant(rng.normal_tensor(b, nz));
        let t = sampler_objective(&mut g, &fb, &gb, eps)?;
        let (e_g_f, kl) = (g.scalar(t.e_g_f), g.scalar(t.kl));
        if !(e_g_f.abs() <= cfg.divergence_threshold) || !kl.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("sampler terms E_g f = {e_g_f}, KL = {kl}"),
            });
        }
        g.backward(t.loss)?;
        let grads: Vec<Tensor> = gb.trainable_vars().iter().map(|&v| g.grad_tensor(v)).collect();
        adam_g.step(flow.trainable_parameters_mut(), &grads)?;
        counters.sampler += 1;

        history.push(ObjectiveTerms::new(it, last.0, e_g_f, kl, last.1, cfg.lambda_gp));
    }
    Ok(Stage2Run {
        energy,
        flow,
        history,
        counters,
    })
}

/// Trains `flow` towards the tilted prior of a fixed energy by minimising
/// the sampler objective alone. Returns the loss of every step.
pub fn fit_sampler(
    energy: &EnergyFunction,
    flow: &mut FlowSampler,
    steps: usize,
    batch_size: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Empty("sampler batch"));
    }
    let nz = flow.nz();
    let mut opt = Adam::new(adam, flow.trainable_parameters());
    let mut rng = SeededRng::new(seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut g = Graph::new();
        let fb = energy.bind(&mut g, false);
        let gb = flow.bind(&mut g, true);
        let eps = g.constant(rng.normal_tensor(batch_size, nz));
        let t = sampler_objective(&mut g, &fb, &gb, eps)?;
        let v = g.scalar(t.loss);
        if !v.is_finite() {
            return Err(Error::Diverged {
                iteration: step,
                detail: format!("sampler loss {v}"),
            });
        }
        g.backward(t.loss)?;
        let grads: Vec<Tensor> = gb.trainable_vars().iter().map(|&v| g.grad_tensor(v)).collect();
        opt.step(flow.trainable_parameters_mut(), &grads)?;
        losses.push(v);
    }
    Ok(losses)
}

/// Per-epoch mean training loss of a baseline.
#[derive(Debug, Clone)]
pub struct BaselineRun<M> {
    pub model: M,
    pub epoch_losses: Vec<f64>,
}

/// Maximum-likelihood flow on aggregate-posterior latents, with the same
/// architecture as the EVaLP sampler.
pub fn train_latent_flow_baseline(
    source: &mut dyn LatentSource,
    default_samples: usize,
    cfg: &Stage2Config,
) -> Result<BaselineRun<FlowSampler>> {
    cfg.validate()?;
    let nz = source.nz();
    let b = cfg.batch_size;
    let mut rng = SeededRng::derive(cfg.seed, 0);
    let mut flow = FlowSampler::new(cfg.flow_spec(nz), &mut rng);
    let init = source.sample(b.max(1000), &mut rng)?;
    flow.init_normalization_from_data(&init)?;
    let mut adam = Adam::new(AdamConfig::standard(cfg.lr_baseline), flow.trainable_parameters());
    let steps = cfg.critic_steps_per_epoch(default_samples);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = SeededRng::derive(cfg.seed, epoch as u64 + 1);
        let mut total = 0.0;
        for _ in 0..steps {
            let z = source.sample(b, &mut rng)?;
            let mut g = Graph::new();
            let gb = flow.bind(&mut g, true);
            let zv = g.constant(z);
            let lp = gb.log_pdf(&mut g, zv)?;
            let mean = g.mean(lp);
            let nll = g.neg(mean);
            let v = g.scalar(nll);
            if !v.is_finite() {
                return Err(Error::Diverged {
                    iteration: epoch,
                    detail: format!("latent flow NLL {v}"),
                });
            }
            g.backward(nll)?;
            let grads: Vec<Tensor> = gb.trainable_vars().iter().map(|&v| g.grad_tensor(v)).collect();
            adam.step(flow.trainable_parameters_mut(), &grads)?;
            total += v;
        }
        epoch_losses.push(total / steps as f64);
    }
    Ok(BaselineRun {
        model: flow,
        epoch_losses,
    })
}

/// Logistic discrimination of aggregate-posterior latents (label 1) from
/// `N(0, I)` draws (label 0), each batch holding `batch_size` of each.
/// The returned energy is the negated logit, so `exp(-f) N(0, I)` is the
/// reweighted prior and `-f` estimates `log(q_agg / p_0)`.
pub fn train_nce_ratio_baseline(
    source: &mut dyn LatentSource,
    default_samples: usize,
    cfg: &Stage2Config,
) -> Result<BaselineRun<EnergyFunction>> {
    cfg.validate()?;
    let nz = source.nz();
    let b = cfg.batch_size;
    let mut rng = SeededRng::derive(cfg.seed, 0);
    let mut energy = initial_energy(nz, cfg, &mut rng);
    let mut adam = Adam::new(
        AdamConfig::standard(cfg.lr_baseline),
        energy.named_parameters().into_iter().map(|(_, t)| t),
    );
    let steps = cfg.critic_steps_per_epoch(default_samples);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = SeededRng::derive(cfg.seed, epoch as u64 + 1);
        let mut total = 0.0;
        for _ in 0..steps {
            let pos = source.sample(b, &mut rng)?;
            let neg = rng.normal_tensor(b, nz);
            let mut g = Graph::new();
            let fb = energy.bind(&mut g, true);
            // logit = -f; loss = softplus(f(pos)) + softplus(-f(neg))
            let p = g.constant(pos);
            let n = g.constant(neg);
            let fp = fb.energy(&mut g, p)?;
            let fneg = fb.energy(&mut g, n)?;
            let lp = g.softplus(fp);
            let nf = g.neg(fneg);
            let ln = g.softplus(nf);
            let mp = g.mean(lp);
            let mn = g.mean(ln);
            let loss = g.add(mp, mn)?;
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Diverged {
                    iteration: epoch,
                    detail: format!("density-ratio loss {v}"),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = fb.vars().iter().map(|&v| g.grad_tensor(v)).collect();
            adam.step(energy.parameters_mut(), &grads)?;
            total += v;
        }
        epoch_losses.push(total / steps as f64);
    }
    Ok(BaselineRun {
        model: energy,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::LN_2PI;
    use crate::stage2::source::GaussianSource;

    fn quick() -> Stage2Config {
        Stage2Config {
            epochs: 2,
            batch_size: 20,
            energy_hidden: 8,
            flow_hidden: 8,
            flow_layers: 2,
            ..Stage2Config::default()
        }
    }

    #[test]
    fn counters_follow_schedule() {
        let mut src = GaussianSource::standard(2);
        let cfg = quick();
        let run = train_prior_on(&mut src, 200, &cfg).unwrap();
        // 2 epochs * 10 critic batches / 5
        assert_eq!(run.counters.sampler, 4);
        assert_eq!(run.counters.critic, 5 * run.counters.sampler);
        assert_eq!(run.history.len(), run.counters.sampler);
        for t in &run.history {
            assert!(t.is_finite());
            assert!(t.lower <= t.upper);
        }
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let d = Stage2Config::default();
        assert_eq!(d.critic_steps_per_sampler, 5);
        assert_eq!(d.lambda_gp, 10.0);
        assert_eq!(d.batch_size, 100);
    }

    #[test]
    fn deterministic() {
        let a = train_prior_on(&mut GaussianSource::standard(2), 100, &quick()).unwrap();
        let b = train_prior_on(&mut GaussianSource::standard(2), 100, &quick()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.flow, b.flow);
    }

    #[test]
    fn divergence_detected() {
        let mut src = GaussianSource {
            mean: alloc::vec![0.0, 0.0],
            std: 1e9,
        };
        let cfg = Stage2Config {
            lr_energy: 0.5,
            ..quick()
        };
        let err = train_prior_on(&mut src, 100, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn invalid_config() {
        for cfg in [
            Stage2Config {
                lambda_gp: 0.0,
                ..quick()
            },
            Stage2Config {
                critic_steps_per_sampler: 0,
                ..quick()
            },
        ] {
            assert!(matches!(
                train_prior_on(&mut GaussianSource::standard(2), 100, &cfg),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn latent_flow_starts_at_gaussian_cross_entropy() {
        // identity flow on standardised N(0, I) data
        let mut src = GaussianSource::standard(2);
        let cfg = Stage2Config {
            epochs: 1,
            lr_baseline: 1e-12,
            ..quick()
        };
        let run = train_latent_flow_baseline(&mut src, 2000, &cfg).unwrap();
        let entropy = 0.5 * 2.0 * (1.0 + LN_2PI);
        assert!((run.epoch_losses[0] - entropy).abs() < 0.1, "{:?}", run.epoch_losses);
    }

    #[test]
    fn nce_indistinguishable_classes() {
        let mut src = GaussianSource::standard(2);
        let cfg = Stage2Config {
            epochs: 20,
            batch_size: 100,
            ..quick()
        };
        let run = train_nce_ratio_baseline(&mut src, 1000, &cfg).unwrap();
        let z = SeededRng::new(7).normal_tensor(500, 2);
        let mean_abs = run.model.evaluate(&z).unwrap().iter().map(|v| v.abs()).sum::<f64>() / 500.0;
        assert!(mean_abs < 0.1, "{mean_abs}");
    }
}
