use alloc::vec::Vec;

use num_traits::Float;

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gauss;
use crate::metrics::{quadrature_log_z, tilted_log_density, GridSpec};
use crate::models::{BoundEnergy, BoundFlow, EnergyFunction, FlowSampler};
use crate::rng::SeededRng;

/// `p(z) = exp(-f(z)) N(z; 0, I) / Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedPrior {
    pub energy: EnergyFunction,
}

impl TiltedPrior {
    pub fn new(energy: EnergyFunction) -> Self {
        Self { energy }
    }

    pub fn nz(&self) -> usize {
        self.energy.nz()
    }

    /// `-f(z) + log N(z; 0, I)` per row.
    pub fn unnormalized_log_density(&self, z: &Tensor) -> Result<Vec<f64>> {
        let e = self.energy.evaluate(z)?;
        Ok(gauss::standard_log_pdf_rows(z)
            .into_iter()
            .zip(e)
            .map(|(l, e)| l - e)
            .collect())
    }

    pub fn log_z_quadrature(&self, grid: &GridSpec) -> Result<f64> {
        quadrature_log_z(&self.energy, grid)
    }

    /// Parameter gradient of the quadrature `log Z`, by reverse mode through
    /// the whole trapezoid sum. One graph holds every grid point.
    pub fn log_z_gradient(&self, grid: &GridSpec) -> Result<Vec<Tensor>> {
        if grid.dim() != self.nz() || grid.dim() > 3 {
            return Err(Error::DimensionMismatch {
                expected: self.nz(),
                got: grid.dim(),
            });
        }
        let pts = grid.chunk(0, grid.len());
        let offsets: Vec<f64> = gauss::standard_log_pdf_rows(&pts)
            .iter()
            .enumerate()
            .map(|(i, l)| l + grid.log_weight(i))
            .collect();
        let mut g = Graph::new();
        let bound = self.energy.bind(&mut g, true);
        let z = g.constant(pts);
        let e = bound.energy(&mut g, z)?;
        let ne = g.neg(e);
        let off = g.constant(Tensor::from_vec(&[grid.len(), 1], offsets)?);
        let terms = g.add(ne, off)?;
        let shift = g.value(terms).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let centered = g.add_scalar(terms, -shift);
        let ex = g.exp(centered);
        let s = g.sum(ex);
        let log_z = g.log(s)?;
        g.backward(log_z)?;
        Ok(bound.vars().into_iter().map(|v| g.grad_tensor(v)).collect())
    }

    /// `E_p[grad_theta f]` under the normalised tilted prior, by quadrature.
    pub fn expected_energy_gradient(&self, grid: &GridSpec) -> Result<Vec<Tensor>> {
        let w = grid.normalized_weights(&tilted_log_density(&self.energy, grid)?);
        let mut acc: Option<Vec<Tensor>> = None;
        grid.for_each_chunk(|start, pts| {
            let mut g = Graph::new();
            let bound = self.energy.bind(&mut g, true);
            let z = g.constant(pts.clone());
            let e = bound.energy(&mut g, z)?;
            let wc = g.constant(Tensor::from_vec(
                &[pts.rows(), 1],
                w[start..start + pts.rows()].to_vec(),
            )?);
            let we = g.mul(e, wc)?;
            let root = g.sum(we);
            g.backward(root)?;
            let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| g.grad_tensor(v)).collect();
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for (t, gr) in a.iter_mut().zip(&grads) {
                        for (x, y) in t.data_mut().iter_mut().zip(gr.data()) {
                            *x += y;
                        }
                    }
                }
            }
            Ok(())
        })?;
        acc.ok_or(Error::Empty("grid"))
    }
}

/// One logged iteration of the alternating optimisation. The constant
/// data term of the bounds is left out.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectiveTerms {
    pub iteration: usize,
    /// `E_q[f]` over the aggregate-posterior batch.
    pub e_q_f: f64,
    /// `E_g[f]` over sampler draws.
    pub e_g_f: f64,
    /// Monte Carlo `KL(p_g || p_0)`.
    pub kl_g_p0: f64,
    pub gp: f64,
    /// `-e_q_f + e_g_f + kl_g_p0`.
    pub upper: f64,
    /// `upper - lambda * gp`.
    pub lower: f64,
    /// `-e_g_f - kl_g_p0`, the variational log-normaliser estimate.
    pub logz_est: f64,
}

impl ObjectiveTerms {
    pub fn new(iteration: usize, e_q_f: f64, e_g_f: f64, kl_g_p0: f64, gp: f64, lambda: f64) -> Self {
        let upper = -e_q_f + e_g_f + kl_g_p0;
        Self {
            iteration,
            e_q_f,
            e_g_f,
            kl_g_p0,
            gp,
            upper,
            lower: upper - lambda * gp,
            logz_est: -e_g_f - kl_g_p0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.e_q_f,
            self.e_g_f,
            self.kl_g_p0,
            self.gp,
            self.upper,
            self.lower,
            self.logz_est,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Handles of the sampler objective `E_g[f] + KL(p_g || p_0)`.
#[derive(Debug, Clone, Copy)]
pub struct SamplerTerms {
    pub loss: Var,
    pub e_g_f: Var,
    pub kl: Var,
}

/// Builds the sampler objective for base noise `eps`. The energy should be
/// bound as constants so only the flow receives gradients.
pub fn sampler_objective(g: &mut Graph, energy: &BoundEnergy, flow: &BoundFlow, eps: Var) -> Result<SamplerTerms> {
    let (z, logdet) = flow.forward(g, eps)?;
    let f = energy.energy(g, z)?;
    let e_g_f = g.mean(f);
    // log p_g(z) = log N(eps) - logdet
    let log_base = gauss::standard_log_pdf(g, eps);
    let log_pg = g.sub(log_base, logdet)?;
    let log_p0 = gauss::standard_log_pdf(g, z);
    let ratio = g.sub(log_pg, log_p0)?;
    let kl = g.mean(ratio);
    let loss = g.add(e_g_f, kl)?;
    Ok(SamplerTerms { loss, e_g_f, kl })
}

/// `mean_i (|grad f(z_hat_i)| - 1)^2` at `z_hat = u z_q + (1 - u) z_g`.
/// `u` holds one mixing weight per row, shape `[B, 1]`.
pub fn gradient_penalty_term(
    g: &mut Graph,
    energy: &BoundEnergy,
    z_q: &Tensor,
    z_g: &Tensor,
    u: &Tensor,
) -> Result<Var> {
    if z_q.shape() != z_g.shape() {
        return Err(Error::ShapeMismatch {
            op: "gradient_penalty",
            left: z_q.shape().to_vec(),
            right: z_g.shape().to_vec(),
        });
    }
    if u.shape() != [z_q.rows(), 1] {
        return Err(Error::ShapeMismatch {
            op: "gradient_penalty mix",
            left: alloc::vec![z_q.rows(), 1],
            right: u.shape().to_vec(),
        });
    }
    let d = z_q.cols();
    let mut mixed = z_q.clone();
    for (i, v) in mixed.data_mut().iter_mut().enumerate() {
        let w = u.data()[i / d];
        *v = w * *v + (1.0 - w) * z_g.data()[i];
    }
    let z_hat = g.constant(mixed);
    let grad = energy.input_grad(g, z_hat)?;
    let sq = g.square(grad);
    let norm2 = g.sum_rows(sq);
    let norm = g.sqrt(norm2)?;
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.square(dev);
    Ok(g.mean(dev2))
}

/// Handles of the critic objective `E_q[f] - E_g[f] + lambda * gp`.
#[derive(Debug, Clone, Copy)]
pub struct CriticTerms {
    pub loss: Var,
    pub e_q_f: Var,
    pub e_g_f: Var,
    pub gp: Var,
}

/// Builds the critic objective. `z_g` enters as data, detached from the
/// sampler.
pub fn critic_objective(
    g: &mut Graph,
    energy: &BoundEnergy,
    z_q: &Tensor,
    z_g: &Tensor,
    u: &Tensor,
    lambda: f64,
) -> Result<CriticTerms> {
    let q = g.constant(z_q.clone());
    let s = g.constant(z_g.clone());
    let fq = energy.energy(g, q)?;
    let fg = energy.energy(g, s)?;
    let e_q_f = g.mean(fq);
    let e_g_f = g.mean(fg);
    let gp = gradient_penalty_term(g, energy, z_q, z_g, u)?;
    let diff = g.sub(e_q_f, e_g_f)?;
    let pen = g.scale(gp, lambda);
    let loss = g.add(diff, pen)?;
    Ok(CriticTerms { loss, e_q_f, e_g_f, gp })
}

fn finite(v: f64, context: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context })
    }
}

fn mix_weights(n: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::from_vec(&[n, 1], (0..n).map(|_| rng.uniform()).collect()).expect("shape")
}

/// Monte Carlo sampler loss over `n` base draws.
pub fn sampler_loss(f: &EnergyFunction, flow: &FlowSampler, n: usize, rng: &mut SeededRng) -> Result<f64> {
    if n == 0 {
        return Err(Error::Empty("sampler batch"));
    }
    let mut g = Graph::new();
    let fb = f.bind(&mut g, false);
    let gb = flow.bind(&mut g, false);
    let eps = g.constant(rng.normal_tensor(n, flow.nz()));
    let t = sampler_objective(&mut g, &fb, &gb, eps)?;
    finite(g.scalar(t.loss), "sampler loss")
}

pub fn gradient_penalty(f: &EnergyFunction, z_q: &Tensor, z_g: &Tensor, rng: &mut SeededRng) -> Result<f64> {
    let mut g = Graph::new();
    let fb = f.bind(&mut g, false);
    let u = mix_weights(z_q.rows(), rng);
    let gp = gradient_penalty_term(&mut g, &fb, z_q, z_g, &u)?;
    finite(g.scalar(gp), "gradient penalty")
}

/// Critic loss against fresh sampler draws, one per row of `z_q`.
pub fn critic_loss(
    f: &EnergyFunction,
    flow: &FlowSampler,
    z_q: &Tensor,
    lambda: f64,
    rng: &mut SeededRng,
) -> Result<f64> {
    let (z_g, _) = flow.forward_values(&rng.normal_tensor(z_q.rows(), flow.nz()))?;
    let u = mix_weights(z_q.rows(), rng);
    let mut g = Graph::new();
    let fb = f.bind(&mut g, false);
    let t = critic_objective(&mut g, &fb, z_q, &z_g, &u, lambda)?;
    finite(g.scalar(t.loss), "critic loss")
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

/// `-E_g[f] - KL(p_g || p_0)` from `n` base draws; a lower bound on
/// `log Z` in expectation for any sampler.
pub fn log_z_variational_estimate(
    f: &EnergyFunction,
    flow: &FlowSampler,
    n: usize,
    rng: &mut SeededRng,
) -> Result<McEstimate> {
    if n == 0 {
        return Err(Error::Empty("log Z sample count"));
    }
    let eps = rng.normal_tensor(n, flow.nz());
    let (z, logdet) = flow.forward_values(&eps)?;
    let e = f.evaluate(&z)?;
    let lb = gauss::standard_log_pdf_rows(&eps);
    let l0 = gauss::standard_log_pdf_rows(&z);
    let per: Vec<f64> = (0..n).map(|i| -e[i] - (lb[i] - logdet[i] - l0[i])).collect();
    let est = McEstimate::from_samples(&per);
    finite(est.mean, "log Z estimate")?;
    Ok(est)
}
