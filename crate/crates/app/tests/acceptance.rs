//! Acceptance suite: one PASS/FAIL line per criterion. Criterion 12 is
//! reported but does not affect the exit status.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use evalp::config::RunConfig;
use evalp::io::load_idx;
use evalp::pipeline::{evaluate, fid_proxy, run_pipeline, sweep_kl, EvalReport, PipelineRun, SweepRow};
use evalp_core::data::{encode_idx, IdxArray};
use evalp_core::diff::{gradcheck, leaky_relu, OpKind};
use evalp_core::metrics::{quadrature_log_z, quadrature_tilted_mean, GridSpec};
use evalp_core::models::{
    Activation, EnergyFunction, FlowSampler, FlowSpec, Mlp, MlpSpec, ObservationModel, Parameterized, VaeModel, VaeSpec,
};
use evalp_core::sampling::{sample_fast, sample_sir, sample_sir_batch, SirConfig, WeightMode};
use evalp_core::stage1::{elbo_terms, train_vae, Stage1Config};
use evalp_core::stage2::{
    critic_objective, fit_sampler, log_z_variational_estimate, sampler_objective, train_latent_flow_baseline,
    train_prior, AggregatePosterior, ObjectiveTerms, Stage2Config, TiltedPrior,
};
use evalp_core::{AdamConfig, Graph, SeededRng, Tensor, Var};
use nalgebra::DMatrix;

const SEEDS: [u64; 3] = [0, 1, 2];
const KL_WEIGHTS: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_error(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

fn normal(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Normal entries pushed at least 0.05 away from zero, for kinked ops.
fn off_kink(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    normal(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// `sum(w * y)` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> evalp_core::Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn worst(errors: &mut Vec<(String, f64)>, name: &str, e: f64) {
    errors.push((name.to_string(), e));
}

/// Smallest |pre-activation| of any kinked hidden layer over the rows of `x`.
fn min_abs_preactivation(mlp: &Mlp, x: &Tensor) -> f64 {
    let acts = &mlp.spec().activations;
    let mut h = x.clone();
    let mut min = f64::INFINITY;
    for (layer, act) in mlp.layers().iter().zip(acts) {
        let (k, n) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let mut pre = vec![0.0; h.rows() * n];
        for r in 0..h.rows() {
            for j in 0..n {
                pre[r * n + j] =
                    layer.bias.data()[j] + (0..k).map(|i| h.get(r, i) * layer.weight.get(i, j)).sum::<f64>();
            }
        }
        if matches!(act, Activation::Relu | Activation::LeakyRelu) {
            min = pre.iter().fold(min, |m, v| m.min(v.abs()));
        }
        let act = *act;
        h = Tensor::from_vec(&[h.rows(), n], pre).unwrap().map(|v| match act {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu => leaky_relu(v),
            Activation::Tanh => v.tanh(),
            _ => v,
        });
    }
    min
}

fn params_of(m: &impl Parameterized) -> Vec<Tensor> {
    m.named_parameters().into_iter().map(|(_, t)| t.clone()).collect()
}

// 1 ------------------------------------------------------------------------

fn op_inputs(kind: OpKind, rng: &mut SeededRng) -> Vec<Tensor> {
    let (r, c) = (3, 4);
    match kind {
        OpKind::MatMul => vec![normal(rng, &[r, c]), normal(rng, &[c, 2])],
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![normal(rng, &[r, c]), normal(rng, &[r, c])],
        OpKind::Concat => vec![normal(rng, &[r, c]), normal(rng, &[r, 2])],
        OpKind::Log | OpKind::Sqrt => vec![uniform(rng, &[r, c], 0.3, 3.0)],
        OpKind::Relu | OpKind::LeakyRelu => vec![off_kink(rng, &[r, c])],
        _ => vec![normal(rng, &[r, c])],
    }
}

fn gradcheck_ops(points: usize) -> Vec<(String, f64)> {
    let kinds = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Softplus,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumRows,
        OpKind::Concat,
        OpKind::Slice { start: 1, end: 3 },
    ];
    let mut out = Vec::new();
    for (i, kind) in kinds.into_iter().enumerate() {
        let mut rng = SeededRng::derive(100, i as u64);
        let mut max = 0.0f64;
        for _ in 0..points {
            let inputs = op_inputs(kind, &mut rng);
            let mut probe = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
            let y = probe.apply(kind, &vars).unwrap();
            let w = normal(&mut rng, probe.shape(y));
            let e = gradcheck(
                |g, v| {
                    let y = g.apply(kind, v)?;
                    weighted_sum(g, y, &w)
                },
                &inputs,
            )
            .unwrap();
            max = max.max(e);
        }
        worst(&mut out, &format!("{kind:?}"), max);
    }
    // composite ops outside the dispatch table
    let mut rng = SeededRng::derive(100, 99);
    let mut max = 0.0f64;
    for _ in 0..points {
        let x = normal(&mut rng, &[3, 4]);
        let w = normal(&mut rng, &[3, 4]);
        let e = gradcheck(
            |g, v| {
                let a = g.scale(v[0], -1.7);
                let b = g.add_scalar(a, 0.3);
                let c = g.clamp(b, -1.0, 1.0);
                let d = g.neg(c);
                weighted_sum(g, d, &w)
            },
            &[x.map(|v| {
                if ((v * -1.7 + 0.3).abs() - 1.0).abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })],
        )
        .unwrap();
        max = max.max(e);
    }
    worst(&mut out, "scale/add_scalar/clamp/neg", max);
    out
}

fn gradcheck_models(points: usize) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = SeededRng::new(200);

    // energy: parameters and input, plus the gradient-penalty critic loss.
    // Draws with a hidden unit within 1e-4 of its kink are replaced: the
    // central difference would straddle a point of non-differentiability.
    let (mut e_max, mut c_max, mut redrawn) = (0.0f64, 0.0f64, 0);
    let mut done = 0;
    while done < points {
        let energy = EnergyFunction::new(2, 6, &mut rng);
        let z = normal(&mut rng, &[3, 2]);
        let z_q = normal(&mut rng, &[4, 2]);
        let z_g = normal(&mut rng, &[4, 2]);
        let u = uniform(&mut rng, &[4, 1], 0.0, 1.0);
        let mix = Tensor::from_vec(
            &[4, 2],
            (0..8)
                .map(|i| u.data()[i / 2] * z_q.data()[i] + (1.0 - u.data()[i / 2]) * z_g.data()[i])
                .collect(),
        )
        .unwrap();
        if [&z, &z_q, &z_g, &mix]
            .iter()
            .any(|x| min_abs_preactivation(energy.mlp(), x) < 1e-4)
        {
            redrawn += 1;
            continue;
        }
        done += 1;
        let mut inputs = params_of(&energy);
        let np = inputs.len();
        inputs.push(z);
        let w = normal(&mut rng, &[3, 1]);
        let e = gradcheck(
            |g, v| {
                let b = energy.bind_vars(&v[..np])?;
                let f = b.energy(g, v[np])?;
                weighted_sum(g, f, &w)
            },
            &inputs,
        )
        .unwrap();
        e_max = e_max.max(e);

        let e = gradcheck(
            |g, v| {
                let b = energy.bind_vars(v)?;
                Ok(critic_objective(g, &b, &z_q, &z_g, &u, 10.0)?.loss)
            },
            &params_of(&energy),
        )
        .unwrap();
        c_max = c_max.max(e);
    }
    worst(&mut out, "energy f(z)", e_max);
    worst(
        &mut out,
        &format!("critic loss with gradient penalty ({redrawn} draws replaced)"),
        c_max,
    );

    // flow: forward map, log-det and density, through parameters and noise
    let spec = FlowSpec {
        nz: 2,
        hidden: 4,
        layers: 2,
    };
    let (mut f_max, mut s_max) = (0.0f64, 0.0f64);
    for _ in 0..points {
        let flow = FlowSampler::randomized(spec, &mut rng);
        let mut inputs = params_of(&flow);
        let np = inputs.len();
        inputs.push(normal(&mut rng, &[3, 2]));
        let wz = normal(&mut rng, &[3, 2]);
        let wl = normal(&mut rng, &[3, 1]);
        let e = gradcheck(
            |g, v| {
                let b = flow.bind_vars(g, &v[..np])?;
                let (z, logdet) = b.forward(g, v[np])?;
                let a = weighted_sum(g, z, &wz)?;
                let c = weighted_sum(g, logdet, &wl)?;
                let lp = b.log_pdf(g, v[np])?;
                let d = weighted_sum(g, lp, &wl)?;
                let s = g.add(a, c)?;
                g.add(s, d)
            },
            &inputs,
        )
        .unwrap();
        f_max = f_max.max(e);

        let energy = EnergyFunction::new(2, 4, &mut rng);
        let eps = normal(&mut rng, &[3, 2]);
        let e = gradcheck(
            |g, v| {
                let b = flow.bind_vars(g, v)?;
                let fb = energy.bind(g, false);
                let x = g.constant(eps.clone());
                Ok(sampler_objective(g, &fb, &b, x)?.loss)
            },
            &inputs[..np],
        )
        .unwrap();
        s_max = s_max.max(e);
    }
    worst(&mut out, "flow forward, log-det, log-density", f_max);
    worst(&mut out, "sampler loss", s_max);

    // VAE encoder/decoder through the negative ELBO, both likelihoods
    for obs in [ObservationModel::GaussianFixed, ObservationModel::Bernoulli] {
        let spec = VaeSpec {
            data_dim: 3,
            nz: 2,
            hidden: vec![4],
            activation: Activation::Tanh,
            observation: obs,
        };
        let mut max = 0.0f64;
        for _ in 0..points {
            let vae = VaeModel::new(spec.clone(), &mut rng).unwrap();
            let x = match obs {
                ObservationModel::Bernoulli => uniform(&mut rng, &[3, 3], 0.0, 1.0),
                ObservationModel::GaussianFixed => normal(&mut rng, &[3, 3]),
            };
            let eps = normal(&mut rng, &[3, 2]);
            let e = gradcheck(
                |g, v| {
                    let b = vae.bind_vars(v)?;
                    let xv = g.constant(x.clone());
                    let ev = g.constant(eps.clone());
                    Ok(elbo_terms(g, &b, xv, ev, 0.7)?.total)
                },
                &params_of(&vae),
            )
            .unwrap();
            max = max.max(e);
        }
        worst(&mut out, &format!("vae negative elbo ({obs:?})"), max);
    }

    // leaky-ReLU and ReLU MLP blocks with their default widths pattern
    let mut max = 0.0f64;
    for _ in 0..points {
        let spec = MlpSpec::new(
            vec![3, 5, 4, 2],
            vec![Activation::Relu, Activation::LeakyRelu, Activation::None],
        )
        .unwrap();
        let mlp = Mlp::new(spec, &mut rng);
        let energy_like: Vec<Tensor> = mlp
            .layers()
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect();
        let x = off_kink(&mut rng, &[2, 3]);
        let w = normal(&mut rng, &[2, 2]);
        let e = gradcheck(
            |g, v| {
                let b = mlp.bind_vars(v)?;
                let xv = g.constant(x.clone());
                let y = b.forward(g, xv)?;
                weighted_sum(g, y, &w)
            },
            &energy_like,
        )
        .unwrap();
        max = max.max(e);
    }
    worst(&mut out, "mlp relu/leaky", max);
    out
}

fn criterion_1() -> Check {
    let t = Instant::now();
    let mut all = gradcheck_ops(100);
    all.extend(gradcheck_models(100));
    let elapsed = t.elapsed();
    let (name, e) = all
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure(
        e < 1e-5 && elapsed < Duration::from_secs(60),
        format!(
            "{} checks x 100 points, worst {e:.2e} ({name}), {:.1}s",
            all.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn numerical_log_det(flow: &FlowSampler, eps: &[f64]) -> f64 {
    let d = eps.len();
    let h = 1e-6;
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut up = eps.to_vec();
        let mut down = eps.to_vec();
        up[j] += h;
        down[j] -= h;
        let (zu, _) = flow.forward_values(&Tensor::from_vec(&[1, d], up).unwrap()).unwrap();
        let (zd, _) = flow.forward_values(&Tensor::from_vec(&[1, d], down).unwrap()).unwrap();
        for i in 0..d {
            jac[(i, j)] = (zu.data()[i] - zd.data()[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

fn criterion_2() -> Check {
    let t = Instant::now();
    let mut rng = SeededRng::new(300);
    let (mut round, mut logdet) = (0.0f64, 0.0f64);
    for nz in [2, 4, 16] {
        for _ in 0..5 {
            let flow = FlowSampler::randomized(
                FlowSpec {
                    nz,
                    hidden: 8,
                    layers: 4,
                },
                &mut rng,
            );
            let eps = normal(&mut rng, &[20, nz]);
            let (z, ld) = flow.forward_values(&eps).unwrap();
            let (back, ld_inv) = flow.inverse_values(&z).unwrap();
            for (a, b) in back.data().iter().zip(eps.data()) {
                round = round.max((a - b).abs());
            }
            for r in 0..eps.rows() {
                logdet = logdet.max((ld[r] - numerical_log_det(&flow, eps.row(r))).abs());
                logdet = logdet.max((ld[r] + ld_inv[r]).abs());
            }
        }
    }
    let elapsed = t.elapsed();
    ensure(
        round < 1e-8 && logdet < 1e-5 && elapsed < Duration::from_secs(60),
        format!(
            "round trip {round:.1e}, log-det {logdet:.1e} over dims 2/4/16, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn criterion_3() -> Check {
    let grid = GridSpec::square(2, -8.0, 8.0, 321).unwrap();
    let prior = TiltedPrior::new(EnergyFunction::linear(&[0.6, -0.9], 0.0));
    let direct = prior.log_z_gradient(&grid).map_err(|e| e.to_string())?;
    let expected = prior.expected_energy_gradient(&grid).map_err(|e| e.to_string())?;
    let mut err = 0.0f64;
    for (d, e) in direct.iter().zip(&expected) {
        for (a, b) in d.data().iter().zip(e.data()) {
            err = err.max((a + b).abs());
        }
    }
    // the closed form: log Z = |a|^2 / 2, so grad_a log Z = a
    let closed = (direct[0].data()[0] - 0.6).abs().max((direct[0].data()[1] + 0.9).abs());
    ensure(
        err < 1e-6 && closed < 1e-6,
        format!("|grad log Z + E[grad f]| = {err:.1e}, vs closed form {closed:.1e}"),
    )
}

// 4 ------------------------------------------------------------------------

fn criterion_4() -> Check {
    let t = Instant::now();
    let grid = GridSpec::standard(2);
    let mut rng = SeededRng::new(400);
    let mut slack = f64::INFINITY;
    for _ in 0..20 {
        let mut energy = EnergyFunction::new(2, 16, &mut rng);
        for p in energy.parameters_mut() {
            for v in p.data_mut() {
                *v *= 1.5;
            }
        }
        let flow = FlowSampler::randomized(
            FlowSpec {
                nz: 2,
                hidden: 16,
                layers: 4,
            },
            &mut rng,
        );
        let truth = quadrature_log_z(&energy, &grid).unwrap();
        let est = log_z_variational_estimate(&energy, &flow, 4000, &mut rng).unwrap();
        slack = slack.min(truth + 3.0 * est.std_error - est.mean);
    }
    let f = EnergyFunction::linear(&[-1.0, 0.0], 0.0);
    let mut flow = FlowSampler::new(
        FlowSpec {
            nz: 2,
            hidden: 64,
            layers: 4,
        },
        &mut rng,
    );
    fit_sampler(&f, &mut flow, 1500, 200, AdamConfig::adversarial(1e-3), 1).map_err(|e| e.to_string())?;
    let est = log_z_variational_estimate(&f, &flow, 20000, &mut rng).unwrap();
    let elapsed = t.elapsed();
    ensure(
        slack >= 0.0 && (est.mean - 0.5).abs() < 0.05 && elapsed < Duration::from_secs(300),
        format!(
            "min slack over 20 pairs {slack:.3}; trained linear tilt {:.4} +- {:.4} (target 0.5), {:.0}s",
            est.mean,
            est.std_error,
            elapsed.as_secs_f64()
        ),
    )
}

// 5-8: the 2-D pipeline ------------------------------------------------------

struct SeedRun {
    run: PipelineRun,
    report: EvalReport,
    fid_latent_flow: f64,
    seconds: f64,
}

fn pipeline_config() -> RunConfig {
    RunConfig::default()
}

fn pipeline_runs() -> Result<Vec<SeedRun>, String> {
    SEEDS
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let cfg = RunConfig {
                seed: Some(seed),
                ..pipeline_config()
            }
            .resolved();
            let run = run_pipeline(&cfg).map_err(|e| e.to_string())?;
            let (vae, data) = (&run.stage1.model, &run.data);
            let report = evaluate(vae, &run.stage2.energy, &run.stage2.flow, data, &cfg).map_err(|e| e.to_string())?;
            let mut src = AggregatePosterior { model: vae, data };
            let lf = train_latent_flow_baseline(&mut src, data.len(), &cfg.stage2).map_err(|e| e.to_string())?;
            let mut rng = SeededRng::derive(seed, 0x1F);
            let (z, _) = sample_fast(&lf.model, cfg.eval.samples, &mut rng).unwrap();
            let fid_latent_flow = fid_proxy(vae, data, &z).map_err(|e| e.to_string())?;
            Ok(SeedRun {
                run,
                report,
                fid_latent_flow,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

fn criterion_5(runs: &[SeedRun]) -> Check {
    let lambda = pipeline_config().stage2.lambda_gp;
    let mut rows = 0;
    for r in runs {
        for h in &r.run.stage2.history {
            rows += 1;
            let recomputed = h.upper - lambda * h.gp;
            if h.lower.partial_cmp(&h.upper).is_none_or(|o| o.is_gt())
                || (h.lower - recomputed).abs() > 1e-12 * recomputed.abs().max(1.0)
            {
                return Err(format!(
                    "iteration {}: lower {} upper {} gp {}",
                    h.iteration, h.lower, h.upper, h.gp
                ));
            }
            if h.gp == 0.0 && h.lower != h.upper {
                return Err(format!("iteration {}: gp = 0 but lower != upper", h.iteration));
            }
        }
    }
    let zero = ObjectiveTerms::new(0, 0.3, -0.2, 0.1, 0.0, lambda);
    ensure(
        zero.lower == zero.upper,
        format!("{rows} logged iterations over 3 runs satisfy lower <= upper; gp = 0 gives equality"),
    )
}

fn criterion_6(runs: &[SeedRun]) -> Check {
    let cfg = Stage2Config::default();
    let mut detail = format!("lambda {} k {}", cfg.lambda_gp, cfg.critic_steps_per_sampler);
    let mut ok = cfg.lambda_gp == 10.0 && cfg.critic_steps_per_sampler == 5;
    for r in runs {
        let c = r.run.stage2.counters;
        let expected = cfg.sampler_iterations(r.run.data.len());
        ok &= c.critic == 5 * c.sampler && c.sampler == expected && r.run.stage2.history.len() == c.sampler;
        detail += &format!("; critic {} sampler {}", c.critic, c.sampler);
    }
    ensure(ok, detail)
}

fn criterion_7(runs: &[SeedRun]) -> Check {
    let pick = |f: fn(&EvalReport) -> f64| mean(&runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
    let base = pick(|r| r.mmd_base);
    let evalp = pick(|r| r.mmd_evalp);
    let sir = pick(|r| r.mmd_evalp_sir);
    let literal = pick(|r| r.mmd_evalp_sir_literal);
    let seconds: f64 = runs.iter().map(|r| r.seconds).sum();
    let gaps: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}", r.report.log_z_gap.unwrap_or(f64::NAN)))
        .collect();
    ensure(
        evalp <= 0.7 * base && sir <= evalp && evalp <= base && seconds < 1800.0,
        format!(
            "MMD base {base:.4}, EVaLP {evalp:.4} (ratio {:.2}), EVaLP+SIR {sir:.4} [exp(-f) weights: {literal:.4}]; \
             log-Z gaps {}; {seconds:.0}s",
            evalp / base,
            gaps.join("/")
        ),
    )
}

fn criterion_8(runs: &[SeedRun]) -> Check {
    let base = mean(&runs.iter().map(|r| r.report.fid_proxy_base).collect::<Vec<_>>());
    let evalp = mean(&runs.iter().map(|r| r.report.fid_proxy_evalp).collect::<Vec<_>>());
    let wins = runs
        .iter()
        .filter(|r| r.report.fid_proxy_evalp < r.fid_latent_flow)
        .count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.0}/{:.0}", r.report.fid_proxy_evalp, r.fid_latent_flow))
        .collect();
    ensure(
        evalp < base && wins >= 2,
        format!(
            "Frechet proxy base {base:.1} -> EVaLP {evalp:.1}; EVaLP/latent flow per seed {} ({wins} of 3 wins)",
            per_seed.join(", ")
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn criterion_9() -> Check {
    let t = Instant::now();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let rows: Vec<SweepRow> =
        sweep_kl(&pipeline_config(), &KL_WEIGHTS, &SEEDS, threads, None).map_err(|e| e.to_string())?;
    if let Some(bad) = rows.iter().find(|r| r.error.is_some()) {
        return Err(format!(
            "kl {} seed {}: {}",
            bad.kl_weight,
            bad.seed,
            bad.error.as_deref().unwrap_or("")
        ));
    }
    let gaps = |w: f64, other: fn(&SweepRow) -> f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.kl_weight == w)
            .map(|r| r.fid_proxy_vae.unwrap() - other(r))
            .collect()
    };
    let evalp_gap = |w| gaps(w, |r| r.fid_proxy_evalp.unwrap());
    let nce_gap = |w| gaps(w, |r| r.fid_proxy_nce.unwrap());

    let mean_gaps: Vec<f64> = KL_WEIGHTS.iter().map(|&w| mean(&evalp_gap(w))).collect();
    let largest_first = mean_gaps[1..].iter().all(|&g| mean_gaps[0] > g);
    let high = evalp_gap(100.0);
    let vanishes = mean(&high).abs() <= 2.0 * std_error(&high);
    let degrade_evalp = mean(&evalp_gap(1.0)) - mean(&evalp_gap(0.1));
    let degrade_nce = mean(&nce_gap(1.0)) - mean(&nce_gap(0.1));
    let nce_faster = degrade_nce > degrade_evalp;

    let table: Vec<String> = KL_WEIGHTS
        .iter()
        .map(|&w| {
            let col = |f: fn(&SweepRow) -> Option<f64>| {
                mean(
                    &rows
                        .iter()
                        .filter(|r| r.kl_weight == w)
                        .map(|r| f(r).unwrap())
                        .collect::<Vec<_>>(),
                )
            };
            format!(
                "w={w}: vae {:.1} evalp {:.1} nce {:.1} mmd1 {:.3}",
                col(|r| r.fid_proxy_vae),
                col(|r| r.fid_proxy_evalp),
                col(|r| r.fid_proxy_nce),
                col(|r| r.mmd_stage1)
            )
        })
        .collect();
    ensure(
        largest_first && vanishes && nce_faster,
        format!(
            "gap largest at 0.1: {largest_first} ({}); gap at 100 {:.1} +- {:.1} vanishes: {vanishes}; \
             degradation 1 -> 0.1 NCE {degrade_nce:.1} vs EVaLP {degrade_evalp:.1}: {nce_faster}; [{}]; {:.0}s",
            mean_gaps
                .iter()
                .map(|g| format!("{g:.1}"))
                .collect::<Vec<_>>()
                .join("/"),
            mean(&high),
            std_error(&high),
            table.join("; "),
            t.elapsed().as_secs_f64()
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn criterion_10(runs: &[SeedRun]) -> Check {
    let stage2 = &runs[0].run.stage2;
    let (energy, flow) = (&stage2.energy, &stage2.flow);
    let vae = &runs[0].run.stage1.model;
    let mut rng = SeededRng::new(1000);
    let n = 10_000;

    let (_, fast_nfe) = sample_fast(flow, 1, &mut rng).unwrap();
    let full = SirConfig {
        proposals: 500,
        normalizer_samples: 500,
        ..SirConfig::default()
    };
    let (_, sir_nfe) = sample_sir_batch(energy, flow, 3, &full, &mut rng).unwrap();
    let nfe_ok = (fast_nfe.forward(), fast_nfe.backward()) == (1, 0)
        && sir_nfe.energy_forward == 1000
        && sir_nfe.flow_forward == 1000
        && sir_nfe.backward() == 0;

    let t = Instant::now();
    let (z, _) = sample_fast(flow, n, &mut rng).unwrap();
    evalp_core::sampling::generate(vae, &z).unwrap();
    let fast = t.elapsed().as_secs_f64() / n as f64;
    // the normaliser estimate does not influence the draw; timing it would
    // only widen the gap
    let timed = SirConfig {
        proposals: 500,
        normalizer_samples: 1,
        ..SirConfig::default()
    };
    let t = Instant::now();
    let (z, _) = sample_sir_batch(energy, flow, n, &timed, &mut rng).unwrap();
    evalp_core::sampling::generate(vae, &z).unwrap();
    let sir = t.elapsed().as_secs_f64() / n as f64;
    ensure(
        nfe_ok && fast < sir,
        format!(
            "fast NFE {}/{}; SIR M=N=500 energy {} flow {} backward {}; s/sample over 1e4: fast {fast:.2e}, SIR(M=500) {sir:.2e}",
            fast_nfe.forward(),
            fast_nfe.backward(),
            sir_nfe.energy_forward,
            sir_nfe.flow_forward,
            sir_nfe.backward()
        ),
    )
}

// 11 -----------------------------------------------------------------------

fn criterion_11() -> Check {
    let t = Instant::now();
    let f = EnergyFunction::linear(&[-1.0, 0.0], 0.0);
    let truth = quadrature_tilted_mean(&f, &GridSpec::standard(2)).unwrap();
    let flow = FlowSampler::new(
        FlowSpec {
            nz: 2,
            hidden: 2,
            layers: 2,
        },
        &mut SeededRng::new(0),
    );
    let n = 10_000;
    let mut worst_z = 0.0f64;
    let mut draws = Vec::new();
    for mode in [WeightMode::PaperLiteral, WeightMode::TiltedBase] {
        let cfg = SirConfig {
            proposals: 1000,
            normalizer_samples: 1,
            weight_mode: mode,
            seed: 0,
        };
        let mut rng = SeededRng::new(1100);
        let picks: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| {
                let d = sample_sir(&f, &flow, &cfg, &mut rng).unwrap();
                (d.z, d.index)
            })
            .collect();
        for k in 0..2 {
            let v: Vec<f64> = picks.iter().map(|(z, _)| z[k]).collect();
            worst_z = worst_z.max((mean(&v) - truth[k]).abs() / std_error(&v));
        }
        draws.push(picks);
    }
    let agree = draws[0].iter().zip(&draws[1]).filter(|(a, b)| a.1 == b.1).count();
    let elapsed = t.elapsed();
    ensure(
        worst_z < 3.0 && agree as f64 >= 0.999 * n as f64 && elapsed < Duration::from_secs(120),
        format!(
            "quadrature mean [{:.3}, {:.3}], worst deviation {worst_z:.2} SE; modes pick the same proposal in {agree}/{n}; {:.0}s",
            truth[0],
            truth[1],
            elapsed.as_secs_f64()
        ),
    )
}

// 12 -----------------------------------------------------------------------

/// Digit-like 28x28 images: rings, bars and crosses with jittered position,
/// size and stroke width.
fn synthetic_digits(n: usize, seed: u64) -> IdxArray {
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(n * 784);
    for _ in 0..n {
        let class = rng.below(4);
        let (cx, cy) = (13.5 + rng.uniform_range(-2.0, 2.0), 13.5 + rng.uniform_range(-2.0, 2.0));
        let size = rng.uniform_range(6.0, 9.0);
        let width = rng.uniform_range(1.2, 2.2);
        let tilt = rng.uniform_range(-0.4, 0.4);
        for y in 0..28 {
            for x in 0..28 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (dx * tilt.cos() + dy * tilt.sin(), -dx * tilt.sin() + dy * tilt.cos());
                let dist = match class {
                    0 => ((u / 0.7).hypot(v) - size).abs(),
                    1 => u.abs().max((v.abs() - size).max(0.0)),
                    2 => u.abs().min(v.abs()).max((u.abs().max(v.abs()) - size).max(0.0)),
                    _ => (v - u * 0.8).abs().max((u.hypot(v) - size).max(0.0)),
                };
                let ink = (1.0 - (dist / width).powi(2)).clamp(0.0, 1.0);
                data.push((255.0 * ink).round() as u8);
            }
        }
    }
    IdxArray {
        dims: vec![n as u32, 28, 28],
        data,
    }
}

fn mnist_path() -> Option<PathBuf> {
    std::env::var_os("EVALP_MNIST_IDX")
        .map(PathBuf::from)
        .filter(|p| p.exists())
}

fn criterion_12() -> Check {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (path, source) = match mnist_path() {
        Some(p) => (p, "MNIST"),
        None => {
            let p = dir.path().join("synthetic-digits-idx3-ubyte");
            std::fs::write(&p, encode_idx(&synthetic_digits(1000, 12)).unwrap()).map_err(|e| e.to_string())?;
            (p, "synthetic 28x28 digits")
        }
    };
    let full = load_idx(&path).map_err(|e| e.to_string())?;
    let keep: Vec<usize> = (0..full.len().min(1000)).collect();
    let data = evalp_core::data::Dataset::new(full.name.clone(), full.batch(&keep)).map_err(|e| e.to_string())?;
    let s1 = Stage1Config {
        nz: 16,
        hidden: vec![128],
        observation: ObservationModel::Bernoulli,
        epochs: 30,
        ..Stage1Config::default()
    };
    let vae = train_vae(&data, &s1).map_err(|e| e.to_string())?.model;
    let s2 = Stage2Config {
        energy_hidden: 128,
        flow_layers: 3,
        flow_hidden: 64,
        epochs: 30,
        ..Stage2Config::default()
    };
    let prior = train_prior(&vae, &data, &s2).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(1200);
    let z0 = rng.normal_tensor(1000, 16);
    let (zf, _) = sample_fast(&prior.flow, 1000, &mut rng).unwrap();
    let base = fid_proxy(&vae, &data, &z0).map_err(|e| e.to_string())?;
    let evalp = fid_proxy(&vae, &data, &zf).map_err(|e| e.to_string())?;
    ensure(
        evalp < base,
        format!(
            "{source}, {} images: pixel Frechet proxy base {base:.2} -> EVaLP {evalp:.2}, {:.0}s",
            data.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

fn report(id: u32, name: &str, gating: bool, check: Check) -> bool {
    let (ok, detail) = match check {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let tag = if ok { "PASS" } else { "FAIL" };
    let note = if gating { "" } else { " (non-gating)" };
    println!("{tag} {id:>2} {name}{note}: {detail}");
    ok || !gating
}

fn main() {
    let filter: Vec<u32> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let want = |id: u32| filter.is_empty() || filter.contains(&id);
    let mut ok = true;

    if want(1) {
        ok &= report(1, "gradient correctness", true, criterion_1());
    }
    if want(2) {
        ok &= report(2, "flow exactness", true, criterion_2());
    }
    if want(3) {
        ok &= report(3, "log-normaliser gradient identity", true, criterion_3());
    }
    if want(4) {
        ok &= report(4, "variational log-normaliser bound", true, criterion_4());
    }
    let runs = if [5, 6, 7, 8, 10].into_iter().any(want) {
        Some(pipeline_runs())
    } else {
        None
    };
    let on_runs = |id: u32, name: &str, f: fn(&[SeedRun]) -> Check| match &runs {
        Some(Ok(r)) => report(id, name, true, f(r)),
        Some(Err(e)) => report(id, name, true, Err(format!("pipeline failed: {e}"))),
        None => true,
    };
    if want(5) {
        ok &= on_runs(5, "bound ordering on training logs", criterion_5);
    }
    if want(6) {
        ok &= on_runs(6, "critic/sampler schedule and penalty weight", criterion_6);
    }
    if want(7) {
        ok &= on_runs(7, "prior-hole closure", criterion_7);
    }
    if want(8) {
        ok &= on_runs(8, "generation-quality ordering", criterion_8);
    }
    if want(9) {
        ok &= report(9, "KL-weight robustness sweep", true, criterion_9());
    }
    if want(10) {
        ok &= on_runs(10, "NFE and timing", criterion_10);
    }
    if want(11) {
        ok &= report(11, "SIR correctness", true, criterion_11());
    }
    if want(12) {
        report(12, "image-scale smoke run", false, criterion_12());
    }
    if !ok {
        std::process::exit(1);
    }
}
