//! JSON run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use evalp_core::data::{make_checkerboard, make_gaussian_ring, make_pinwheel, Dataset};
use evalp_core::sampling::SirConfig;
use evalp_core::stage1::Stage1Config;
use evalp_core::stage2::Stage2Config;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::io::load_idx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Ring {
        n: usize,
        modes: usize,
        radius: f64,
        sigma: f64,
    },
    Checkerboard {
        n: usize,
    },
    Pinwheel {
        n: usize,
        arms: usize,
    },
    /// Unsigned-byte IDX images; `limit` keeps the first rows only.
    Idx {
        path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl Default for DatasetConfig {
    /// Eight Gaussians on a ring wide enough that the 2-D latent of a
    /// unit-variance decoder carries information.
    fn default() -> Self {
        Self::Ring {
            n: 2000,
            modes: 8,
            radius: 64.0,
            sigma: 2.0,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self, seed: u64) -> AppResult<Dataset> {
        Ok(match self {
            Self::Ring {
                n,
                modes,
                radius,
                sigma,
            } => make_gaussian_ring(*n, *modes, *radius, *sigma, seed)?,
            Self::Checkerboard { n } => make_checkerboard(*n, seed)?,
            Self::Pinwheel { n, arms } => make_pinwheel(*n, *arms, seed)?,
            Self::Idx { path, limit } => {
                let ds = load_idx(path)?;
                match limit {
                    Some(l) if *l < ds.len() => {
                        let idx: Vec<usize> = (0..*l).collect();
                        Dataset::new(ds.name.clone(), ds.batch(&idx))?
                    }
                    _ => ds,
                }
            }
        })
    }
}

/// Evaluation settings shared by `eval`, `train-prior` and `sweep-kl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples drawn from each prior for MMD and the Fréchet proxy.
    pub samples: usize,
    /// Half-width of the square latent grid used for density exports.
    pub grid_bound: f64,
    pub grid_points: usize,
    /// Base draws for the variational log-normaliser estimate.
    pub log_z_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            grid_bound: 4.0,
            grid_points: 101,
            log_z_samples: 20000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub sir: SirConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
    /// When set, replaces the seed of every stage.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            sir: SirConfig {
                proposals: 100,
                normalizer_samples: 1,
                ..SirConfig::default()
            },
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs"),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> AppResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> AppResult<()> {
        let wrap = |e: evalp_core::Error| AppError::Config(e.to_string());
        self.stage1.validate().map_err(wrap)?;
        self.stage2.validate().map_err(wrap)?;
        self.sir.validate().map_err(wrap)?;
        if self.eval.samples < 2
            || self.eval.grid_points < 16
            || self.eval.grid_bound.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            || self.eval.log_z_samples == 0
        {
            return Err(AppError::Config(
                "eval needs samples >= 2, grid_points >= 16, grid_bound > 0, log_z_samples >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Copy with the global seed pushed into every stage.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if let Some(s) = cfg.seed {
            cfg.stage1.seed = s;
            cfg.stage2.seed = s;
            cfg.sir.seed = s;
        }
        cfg
    }

    /// Resolved configuration as stored in checkpoints and summaries. The
    /// output directory is left out so reruns elsewhere match bytewise.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self.resolved()).expect("config serialises");
        if let Some(map) = v.as_object_mut() {
            map.remove("out_dir");
        }
        v
    }

    pub fn data_seed(&self) -> u64 {
        self.seed.unwrap_or(self.stage1.seed)
    }
}
