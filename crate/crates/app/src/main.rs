use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evalp::commands::{self, ModelPaths, SampleMode};
use evalp::config::RunConfig;
use evalp::error::AppResult;
use evalp_core::sampling::WeightMode;

#[derive(Parser)]
#[command(name = "evalp", version, about = "Two-stage energy-tilted latent priors for VAEs")]
struct Cli {
    /// JSON run configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for `sweep-kl`; other commands run on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Models {
    /// VAE checkpoint [default: OUT/vae.ckpt]
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Energy checkpoint [default: OUT/energy.ckpt]
    #[arg(long)]
    energy: Option<PathBuf>,
    /// Flow checkpoint [default: OUT/flow.ckpt]
    #[arg(long)]
    flow: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fast,
    Sir,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    PaperLiteral,
    TiltedBase,
}

#[derive(Subcommand)]
enum Command {
    /// Train the first-stage VAE.
    TrainVae,
    /// Train the energy and its flow sampler on a trained VAE.
    TrainPrior {
        /// VAE checkpoint [default: OUT/vae.ckpt]
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Draw latents and decoded samples.
    Sample {
        #[command(flatten)]
        models: Models,
        #[arg(long, value_enum, default_value = "fast")]
        mode: Mode,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Proposals per SIR sample.
        #[arg(long)]
        proposals: Option<usize>,
        /// Extra proposals for the SIR normaliser estimate.
        #[arg(long)]
        normalizer_samples: Option<usize>,
        #[arg(long, value_enum)]
        weight_mode: Option<Weights>,
    },
    /// Metric report for trained checkpoints.
    Eval {
        #[command(flatten)]
        models: Models,
    },
    /// Run both stages for each KL weight and seed.
    SweepKl {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 1.0, 10.0, 100.0])]
        weights: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2])]
        seeds: Vec<u64>,
    },
}

impl From<Models> for ModelPaths {
    fn from(m: Models) -> Self {
        Self {
            vae: m.vae,
            energy: m.energy,
            flow: m.flow,
        }
    }
}

fn run(cli: Cli) -> AppResult<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match cli.command {
        Command::TrainVae => commands::train_vae(&cfg),
        Command::TrainPrior { vae } => commands::train_prior_cmd(&cfg, vae.as_deref()),
        Command::Sample {
            models,
            mode,
            count,
            proposals,
            normalizer_samples,
            weight_mode,
        } => {
            if let Some(m) = proposals {
                cfg.sir.proposals = m;
            }
            if let Some(n) = normalizer_samples {
                cfg.sir.normalizer_samples = n;
            }
            if let Some(w) = weight_mode {
                cfg.sir.weight_mode = match w {
                    Weights::PaperLiteral => WeightMode::PaperLiteral,
                    Weights::TiltedBase => WeightMode::TiltedBase,
                };
            }
            cfg.validate()?;
            let mode = match mode {
                Mode::Fast => SampleMode::Fast,
                Mode::Sir => SampleMode::Sir,
            };
            commands::sample(&cfg, &models.into(), mode, count)
        }
        Command::Eval { models } => commands::eval(&cfg, &models.into()),
        Command::SweepKl { weights, seeds } => commands::sweep(&cfg, &weights, &seeds, cli.threads),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serialises")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
