//! Experiment drivers shared by the CLI and the acceptance suite.

use std::path::{Path, PathBuf};

use evalp_core::data::Dataset;
use evalp_core::gauss::standard_log_pdf_rows;
use evalp_core::metrics::{
    density_grid, frechet_gaussian, kde_log_density, mmd_rbf, quadrature_log_z, tilted_log_density, Bandwidth,
    DensityGrid, GridSpec,
};
use evalp_core::models::{EnergyFunction, FlowSampler, VaeModel};
use evalp_core::sampling::{generate, sample_fast, sample_sir_batch, SirConfig, WeightMode};
use evalp_core::stage1::{aggregate_posterior_sample, fit_vae, EpochLoss, Stage1Run};
use evalp_core::stage2::{
    log_z_variational_estimate, train_nce_ratio_baseline, train_prior, AggregatePosterior, Stage2Run,
};
use evalp_core::{Error, SeededRng, Tensor};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::io::{write_grid_csv, write_json, write_rows};

/// Stream ids for the evaluation and sampling generators.
const EVAL_STREAM: u64 = 0xE7A1;
const SWEEP_STREAM: u64 = 0x5EE9;

pub const GRID_FILES: [&str; 4] = [
    "grid_base_prior.csv",
    "grid_tilted_prior.csv",
    "grid_flow.csv",
    "grid_aggregate_kde.csv",
];

pub fn load_dataset(cfg: &RunConfig) -> AppResult<Dataset> {
    cfg.dataset.load(cfg.data_seed())
}

/// Stage-1 training that keeps the last finite model on divergence. The
/// error, if any, is returned alongside the rolled-back model.
pub fn train_vae_keep_last(data: &Dataset, cfg: &RunConfig) -> AppResult<(Stage1Run, Option<Error>)> {
    let s1 = &cfg.stage1;
    s1.validate()?;
    let mut rng = SeededRng::derive(s1.seed, 0);
    let mut model = VaeModel::new(s1.vae_spec(data.dim()), &mut rng)?;
    let mut history: Vec<EpochLoss> = Vec::with_capacity(s1.epochs);
    let outcome = fit_vae(&mut model, data, s1, &mut history);
    let run = Stage1Run { model, history };
    match outcome {
        Ok(()) => Ok((run, None)),
        Err(e @ Error::Diverged { .. }) => Ok((run, Some(e))),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub data: Dataset,
    pub stage1: Stage1Run,
    pub stage2: Stage2Run,
}

/// Both stages end to end on the configured dataset.
pub fn run_pipeline(cfg: &RunConfig) -> AppResult<PipelineRun> {
    let cfg = cfg.resolved();
    let data = load_dataset(&cfg)?;
    let (stage1, err) = train_vae_keep_last(&data, &cfg)?;
    if let Some(e) = err {
        return Err(e.into());
    }
    let stage2 = train_prior(&stage1.model, &data, &cfg.stage2)?;
    Ok(PipelineRun { data, stage1, stage2 })
}

/// Fréchet distance between decoded latents and the dataset, in the
/// dataset's own coordinates.
pub fn fid_proxy(vae: &VaeModel, data: &Dataset, z: &Tensor) -> AppResult<f64> {
    Ok(frechet_gaussian(&generate(vae, z)?, data.samples())?.value)
}

/// Metric report written by `eval`.
///
/// MMD values compare latent samples against aggregate-posterior draws;
/// Fréchet proxies compare decoded samples against the dataset. The `sir`
/// entries resample with the tilted-base weights, `sir_literal` with
/// `exp(-f)` alone. Log-normaliser fields are `None` above three latent
/// dimensions, where quadrature is unavailable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub sir_proposals: usize,
    pub mmd_base: f64,
    pub mmd_evalp: f64,
    pub mmd_evalp_sir: f64,
    pub mmd_evalp_sir_literal: f64,
    pub fid_proxy_base: f64,
    pub fid_proxy_evalp: f64,
    pub fid_proxy_evalp_sir: f64,
    pub fid_proxy_evalp_sir_literal: f64,
    pub fid_proxy_aggregate: f64,
    pub log_z_variational: f64,
    pub log_z_variational_se: f64,
    pub log_z_quadrature: Option<f64>,
    pub log_z_gap: Option<f64>,
}

/// Latent samples of every prior compared by [`evaluate`].
#[derive(Debug, Clone)]
pub struct PriorSamples {
    pub aggregate: Tensor,
    pub base: Tensor,
    pub evalp: Tensor,
    pub sir: Tensor,
    pub sir_literal: Tensor,
}

pub fn draw_prior_samples(
    vae: &VaeModel,
    energy: &EnergyFunction,
    flow: &FlowSampler,
    data: &Dataset,
    cfg: &RunConfig,
) -> AppResult<PriorSamples> {
    let cfg = cfg.resolved();
    let n = cfg.eval.samples;
    let mut rng = SeededRng::derive(cfg.sir.seed, EVAL_STREAM);
    let aggregate = aggregate_posterior_sample(vae, data, n, &mut rng)?;
    let base = rng.normal_tensor(n, vae.nz());
    let (evalp, _) = sample_fast(flow, n, &mut rng)?;
    let tilted = SirConfig {
        weight_mode: WeightMode::TiltedBase,
        ..cfg.sir
    };
    let literal = SirConfig {
        weight_mode: WeightMode::PaperLiteral,
        ..cfg.sir
    };
    let (sir, _) = sample_sir_batch(energy, flow, n, &tilted, &mut rng)?;
    let (sir_literal, _) = sample_sir_batch(energy, flow, n, &literal, &mut rng)?;
    Ok(PriorSamples {
        aggregate,
        base,
        evalp,
        sir,
        sir_literal,
    })
}

pub fn evaluate(
    vae: &VaeModel,
    energy: &EnergyFunction,
    flow: &FlowSampler,
    data: &Dataset,
    cfg: &RunConfig,
) -> AppResult<EvalReport> {
    check_latent_dims(vae, energy, flow)?;
    let cfg = cfg.resolved();
    let s = draw_prior_samples(vae, energy, flow, data, &cfg)?;
    let mmd = |z: &Tensor| mmd_rbf(&s.aggregate, z, Bandwidth::Median);
    let mut rng = SeededRng::derive(cfg.sir.seed, EVAL_STREAM + 1);
    let est = log_z_variational_estimate(energy, flow, cfg.eval.log_z_samples, &mut rng)?;
    let quad = if vae.nz() <= 3 {
        Some(quadrature_log_z(energy, &GridSpec::standard(vae.nz()))?)
    } else {
        None
    };
    Ok(EvalReport {
        samples: cfg.eval.samples,
        sir_proposals: cfg.sir.proposals,
        mmd_base: mmd(&s.base)?,
        mmd_evalp: mmd(&s.evalp)?,
        mmd_evalp_sir: mmd(&s.sir)?,
        mmd_evalp_sir_literal: mmd(&s.sir_literal)?,
        fid_proxy_base: fid_proxy(vae, data, &s.base)?,
        fid_proxy_evalp: fid_proxy(vae, data, &s.evalp)?,
        fid_proxy_evalp_sir: fid_proxy(vae, data, &s.sir)?,
        fid_proxy_evalp_sir_literal: fid_proxy(vae, data, &s.sir_literal)?,
        fid_proxy_aggregate: fid_proxy(vae, data, &s.aggregate)?,
        log_z_variational: est.mean,
        log_z_variational_se: est.std_error,
        log_z_quadrature: quad,
        log_z_gap: quad.map(|q| (est.mean - q).abs()),
    })
}

pub fn check_latent_dims(vae: &VaeModel, energy: &EnergyFunction, flow: &FlowSampler) -> AppResult<()> {
    if energy.nz() != vae.nz() || flow.nz() != vae.nz() {
        return Err(AppError::Incompatible(format!(
            "latent dimensions differ: vae {}, energy {}, flow {}",
            vae.nz(),
            energy.nz(),
            flow.nz()
        )));
    }
    Ok(())
}

/// Base prior, normalised tilted prior, flow density and a kernel estimate
/// of the aggregate posterior on the configured square grid. Two latent
/// dimensions only.
pub fn density_grids(
    vae: &VaeModel,
    energy: &EnergyFunction,
    flow: &FlowSampler,
    data: &Dataset,
    cfg: &RunConfig,
) -> AppResult<[DensityGrid; 4]> {
    check_latent_dims(vae, energy, flow)?;
    let cfg = cfg.resolved();
    let b = cfg.eval.grid_bound;
    let grid = GridSpec::square(vae.nz(), -b, b, cfg.eval.grid_points)?;
    let base = density_grid(&grid, |p| Ok(standard_log_pdf_rows(p)))?;
    let log_z = quadrature_log_z(energy, &GridSpec::standard(vae.nz()))?;
    let tilted = DensityGrid {
        grid: grid.clone(),
        log_density: tilted_log_density(energy, &grid)?
            .into_iter()
            .map(|v| v - log_z)
            .collect(),
    };
    let flow_grid = density_grid(&grid, |p| flow.log_pdf_values(p))?;
    let mut rng = SeededRng::derive(cfg.sir.seed, EVAL_STREAM + 2);
    let q = aggregate_posterior_sample(vae, data, cfg.eval.samples, &mut rng)?;
    let kde = density_grid(&grid, |p| kde_log_density(&q, p, None))?;
    Ok([base, tilted, flow_grid, kde])
}

pub fn write_density_grids(dir: &Path, grids: &[DensityGrid; 4]) -> AppResult<Vec<PathBuf>> {
    GRID_FILES
        .iter()
        .zip(grids)
        .map(|(name, g)| {
            let path = dir.join(name);
            write_grid_csv(&path, g)?;
            Ok(path)
        })
        .collect()
}

/// One cell of the KL-weight sweep. Metric fields are empty when the cell
/// failed; `error` then says why.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub kl_weight: f64,
    pub seed: u64,
    pub fid_proxy_vae: Option<f64>,
    pub fid_proxy_evalp: Option<f64>,
    pub fid_proxy_nce: Option<f64>,
    pub mmd_stage1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SweepMetrics {
    vae: f64,
    evalp: f64,
    nce: f64,
    stage1: f64,
}

fn sweep_cell(cfg: &RunConfig, kl_weight: f64, seed: u64, dir: Option<&Path>) -> AppResult<SweepMetrics> {
    let mut cfg = cfg.clone();
    cfg.seed = Some(seed);
    cfg.stage1.kl_weight = kl_weight;
    cfg.validate()?;
    let cfg = cfg.resolved();
    let run = run_pipeline(&cfg)?;
    let (vae, data) = (&run.stage1.model, &run.data);
    let mut source = AggregatePosterior { model: vae, data };
    let nce = train_nce_ratio_baseline(&mut source, data.len(), &cfg.stage2)?;

    let n = cfg.eval.samples;
    let mut rng = SeededRng::derive(seed, SWEEP_STREAM);
    let q = aggregate_posterior_sample(vae, data, n, &mut rng)?;
    let base = rng.normal_tensor(n, vae.nz());
    let (evalp, _) = sample_fast(&run.stage2.flow, n, &mut rng)?;
    // the density-ratio prior has no sampler of its own: resample Gaussian
    // proposals, for which the tilted-base weights reduce to exp(-f)
    let identity = FlowSampler::new(cfg.stage2.flow_spec(vae.nz()), &mut rng);
    let sir = SirConfig {
        weight_mode: WeightMode::TiltedBase,
        ..cfg.sir
    };
    let (nce_z, _) = sample_sir_batch(&nce.model, &identity, n, &sir, &mut rng)?;

    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        let snapshot = cfg.snapshot();
        Checkpoint::vae(vae, snapshot.clone(), seed).save(&dir.join("vae.ckpt"))?;
        Checkpoint::energy(&run.stage2.energy, snapshot.clone(), seed).save(&dir.join("energy.ckpt"))?;
        Checkpoint::flow(&run.stage2.flow, snapshot, seed).save(&dir.join("flow.ckpt"))?;
    }
    Ok(SweepMetrics {
        vae: fid_proxy(vae, data, &base)?,
        evalp: fid_proxy(vae, data, &evalp)?,
        nce: fid_proxy(vae, data, &nce_z)?,
        stage1: mmd_rbf(&q, &base, Bandwidth::Median)?,
    })
}

/// Full two-stage pipeline for every `(weight, seed)` cell, run on up to
/// `threads` workers. Rows come back in weight-major order regardless of
/// scheduling; a failing cell yields a row with its error and the sweep
/// carries on.
pub fn sweep_kl(
    cfg: &RunConfig,
    weights: &[f64],
    seeds: &[u64],
    threads: usize,
    out: Option<&Path>,
) -> AppResult<Vec<SweepRow>> {
    if weights.len() < 2 {
        return Err(AppError::Config(format!(
            "sweep needs at least 2 kl weights, got {}",
            weights.len()
        )));
    }
    if seeds.is_empty() {
        return Err(AppError::Config("sweep needs at least one seed".into()));
    }
    let cells: Vec<(f64, u64)> = weights
        .iter()
        .flat_map(|&w| seeds.iter().map(move |&s| (w, s)))
        .collect();
    let run_cell = |&(w, s): &(f64, u64)| {
        let dir = out.map(|o| o.join(format!("kl_{w}_seed_{s}")));
        let result = sweep_cell(cfg, w, s, dir.as_deref());
        let mut row = SweepRow {
            kl_weight: w,
            seed: s,
            fid_proxy_vae: None,
            fid_proxy_evalp: None,
            fid_proxy_nce: None,
            mmd_stage1: None,
            error: None,
        };
        match result {
            Ok(m) => {
                row.fid_proxy_vae = Some(m.vae);
                row.fid_proxy_evalp = Some(m.evalp);
                row.fid_proxy_nce = Some(m.nce);
                row.mmd_stage1 = Some(m.stage1);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    };
    let rows = parallel_map(&cells, threads, run_cell);
    if let Some(o) = out {
        write_rows(&o.join("sweep_kl.csv"), &rows)?;
    }
    Ok(rows)
}

/// Order-preserving map over `items` on at most `threads` scoped workers,
/// each taking a contiguous stride of indices.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<R>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(t)
                        .step_by(threads)
                        .map(|(i, x)| (i, f(x)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                slots[i] = Some(r);
            }
        }
        slots
    });
    slots
        .iter_mut()
        .map(|s| s.take().expect("every index visited"))
        .collect()
}

/// Writes `value` as pretty JSON under `dir`.
pub fn write_report<T: Serialize>(dir: &Path, name: &str, value: &T) -> AppResult<PathBuf> {
    let path = dir.join(name);
    write_json(&path, value)?;
    Ok(path)
}
