//! Subcommand bodies. Each writes its artefacts under the output directory
//! and returns a JSON summary for stdout.

use std::path::{Path, PathBuf};
use std::time::Instant;

use evalp_core::models::Parameterized;
use evalp_core::sampling::{generate, sample_fast, sample_sir_batch, NfeCounter, WeightMode};
use evalp_core::stage2::train_prior;
use evalp_core::SeededRng;
use serde_json::{json, Value};

use crate::checkpoint::{Checkpoint, ModelSet};
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::io::{write_stage1_history, write_stage2_history, write_tensor_csv};
use crate::pipeline::{
    density_grids, evaluate, load_dataset, sweep_kl, train_vae_keep_last, write_density_grids, write_report,
};

pub const VAE_CHECKPOINT: &str = "vae.ckpt";
pub const ENERGY_CHECKPOINT: &str = "energy.ckpt";
pub const FLOW_CHECKPOINT: &str = "flow.ckpt";

const SAMPLE_STREAM: u64 = 0x5A3F;

fn prepare_out(cfg: &RunConfig) -> AppResult<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| AppError::io(&cfg.out_dir, e))?;
    Ok(cfg.out_dir.clone())
}

fn paths(s: &[PathBuf]) -> Vec<String> {
    s.iter().map(|p| p.display().to_string()).collect()
}

/// Summary JSON with the wall-clock field attached, also written to
/// `summary_{command}.json`.
fn finish(out: &Path, command: &str, mut summary: Value, started: Instant) -> AppResult<Value> {
    summary["command"] = json!(command);
    summary["wall_seconds"] = json!(started.elapsed().as_secs_f64());
    write_report(out, &format!("summary_{}.json", command.replace('-', "_")), &summary)?;
    Ok(summary)
}

pub fn train_vae(cfg: &RunConfig) -> AppResult<Value> {
    let started = Instant::now();
    let cfg = cfg.resolved();
    let out = prepare_out(&cfg)?;
    let data = load_dataset(&cfg)?;
    let (run, diverged) = train_vae_keep_last(&data, &cfg)?;
    let ckpt = out.join(VAE_CHECKPOINT);
    Checkpoint::vae(&run.model, cfg.snapshot(), cfg.stage1.seed).save(&ckpt)?;
    let history = out.join("history_stage1.csv");
    write_stage1_history(&history, &run.history)?;
    if let Some(e) = diverged {
        return Err(e.into());
    }
    let last = run.history.last();
    let summary = json!({
        "seed": cfg.stage1.seed,
        "dataset": data.name,
        "samples": data.len(),
        "epochs": run.history.len(),
        "final": last.map(|h| json!({"total": h.total, "recon": h.recon, "kl": h.kl})),
        "parameters": run.model.parameter_count(),
        "files": paths(&[ckpt, history]),
    });
    finish(&out, "train-vae", summary, started)
}

pub fn train_prior_cmd(cfg: &RunConfig, vae_path: Option<&Path>) -> AppResult<Value> {
    let started = Instant::now();
    let cfg = cfg.resolved();
    let out = prepare_out(&cfg)?;
    let vae_path = vae_path.map_or_else(|| out.join(VAE_CHECKPOINT), Path::to_path_buf);
    let vae = Checkpoint::load(&vae_path)?
        .into_vae()
        .map_err(|detail| AppError::Checkpoint {
            path: vae_path.clone(),
            detail,
        })?;
    let data = load_dataset(&cfg)?;
    if vae.spec().data_dim != data.dim() {
        return Err(AppError::Incompatible(format!(
            "vae expects {}-dimensional data, dataset has {}",
            vae.spec().data_dim,
            data.dim()
        )));
    }
    let run = train_prior(&vae, &data, &cfg.stage2)?;
    let seed = cfg.stage2.seed;
    let energy_path = out.join(ENERGY_CHECKPOINT);
    let flow_path = out.join(FLOW_CHECKPOINT);
    Checkpoint::energy(&run.energy, cfg.snapshot(), seed).save(&energy_path)?;
    Checkpoint::flow(&run.flow, cfg.snapshot(), seed).save(&flow_path)?;
    let history = out.join("history_stage2.csv");
    write_stage2_history(&history, &run.history)?;
    let mut files = vec![energy_path, flow_path, history];
    if vae.nz() == 2 {
        let grids = density_grids(&vae, &run.energy, &run.flow, &data, &cfg)?;
        files.extend(write_density_grids(&out, &grids)?);
    }
    let last = run.history.last();
    let summary = json!({
        "seed": seed,
        "critic_updates": run.counters.critic,
        "sampler_updates": run.counters.sampler,
        "final": last,
        "files": paths(&files),
    });
    finish(&out, "train-prior", summary, started)
}

/// Checkpoint paths for `sample` and `eval`; unset ones default to the
/// output directory.
#[derive(Debug, Clone, Default)]
pub struct ModelPaths {
    pub vae: Option<PathBuf>,
    pub energy: Option<PathBuf>,
    pub flow: Option<PathBuf>,
}

impl ModelPaths {
    fn load(&self, out: &Path) -> AppResult<ModelSet> {
        let pick = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
        ModelSet::load(
            &pick(&self.vae, VAE_CHECKPOINT),
            &pick(&self.energy, ENERGY_CHECKPOINT),
            &pick(&self.flow, FLOW_CHECKPOINT),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Fast,
    Sir,
}

pub fn sample(cfg: &RunConfig, models: &ModelPaths, mode: SampleMode, count: usize) -> AppResult<Value> {
    let started = Instant::now();
    let cfg = cfg.resolved();
    let out = prepare_out(&cfg)?;
    let m = models.load(&out)?;
    if count == 0 {
        return Err(AppError::Config("count must be at least 1".into()));
    }
    let mut rng = SeededRng::derive(cfg.sir.seed, SAMPLE_STREAM);
    let timer = Instant::now();
    let (z, nfe): (_, NfeCounter) = match mode {
        SampleMode::Fast => sample_fast(&m.flow, count, &mut rng)?,
        SampleMode::Sir => sample_sir_batch(&m.energy, &m.flow, count, &cfg.sir, &mut rng)?,
    };
    let x = generate(&m.vae, &z)?;
    let seconds = timer.elapsed().as_secs_f64();
    let latents = out.join("latents.csv");
    let samples = out.join("samples.csv");
    write_tensor_csv(&latents, "z", &z)?;
    write_tensor_csv(&samples, "x", &x)?;
    let summary = json!({
        "mode": match mode { SampleMode::Fast => "fast", SampleMode::Sir => "sir" },
        "count": count,
        "seed": cfg.sir.seed,
        "sir": (mode == SampleMode::Sir).then(|| json!({
            "proposals": cfg.sir.proposals,
            "normalizer_samples": cfg.sir.normalizer_samples,
            "weight_mode": match cfg.sir.weight_mode {
                WeightMode::PaperLiteral => "paper_literal",
                WeightMode::TiltedBase => "tilted_base",
            },
        })),
        "nfe_per_sample": {
            "forward": nfe.forward(),
            "backward": nfe.backward(),
            "flow_forward": nfe.flow_forward,
            "energy_forward": nfe.energy_forward,
        },
        "seconds_per_sample": seconds / count as f64,
        "files": paths(&[latents, samples]),
    });
    finish(&out, "sample", summary, started)
}

pub fn eval(cfg: &RunConfig, models: &ModelPaths) -> AppResult<Value> {
    let started = Instant::now();
    let cfg = cfg.resolved();
    let out = prepare_out(&cfg)?;
    let m = models.load(&out)?;
    let data = load_dataset(&cfg)?;
    if m.vae.spec().data_dim != data.dim() {
        return Err(AppError::Incompatible(format!(
            "vae expects {}-dimensional data, dataset has {}",
            m.vae.spec().data_dim,
            data.dim()
        )));
    }
    let report = evaluate(&m.vae, &m.energy, &m.flow, &data, &cfg)?;
    let path = write_report(&out, "eval.json", &report)?;
    let summary = json!({ "report": report, "files": paths(&[path]) });
    finish(&out, "eval", summary, started)
}

pub fn sweep(cfg: &RunConfig, weights: &[f64], seeds: &[u64], threads: usize) -> AppResult<Value> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let rows = sweep_kl(cfg, weights, seeds, threads, Some(&out))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let summary = json!({
        "weights": weights,
        "seeds": seeds,
        "rows": rows.len(),
        "failed": failed,
        "files": paths(&[out.join("sweep_kl.csv")]),
    });
    finish(&out, "sweep-kl", summary, started)
}
