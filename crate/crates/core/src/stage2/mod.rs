//! Second stage: learn the energy-tilted prior and its flow sampler by
//! alternating critic and sampler updates, plus the maximum-likelihood
//! latent-flow and density-ratio baselines.

mod objective;
mod source;
mod train;

pub use objective::{
    critic_loss, critic_objective, gradient_penalty, gradient_penalty_term, log_z_variational_estimate, sampler_loss,
    sampler_objective, CriticTerms, McEstimate, ObjectiveTerms, SamplerTerms, TiltedPrior,
};
pub use source::{AggregatePosterior, CachedLatents, GaussianSource, LatentSource};
pub use train::{
    fit_sampler, train_latent_flow_baseline, train_nce_ratio_baseline, train_prior, train_prior_on, BaselineRun,
    Stage2Config, Stage2Run, UpdateCounters,
};
