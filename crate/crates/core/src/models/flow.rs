use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use super::mlp::{Activation, BoundMlp, Mlp, MlpSpec};
use super::Parameterized;
use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gauss;
use crate::rng::SeededRng;

/// Which coordinates a coupling layer leaves unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    /// Even indices pass through, odd indices are transformed.
    Even,
    Odd,
}

impl Parity {
    fn passes(self, index: usize) -> bool {
        match self {
            Self::Even => index.is_multiple_of(2),
            Self::Odd => index % 2 == 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowSpec {
    /// Latent dimension.
    pub nz: usize,
    /// Hidden width of the scale and translation networks.
    pub hidden: usize,
    /// Number of normalisation + coupling blocks.
    pub layers: usize,
}

/// Invertible per-coordinate affine map `u = (h - shift) * exp(-log_scale)`.
///
/// Set once from data and then frozen; its log-determinant is
/// `-sum(log_scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub shift: Tensor,
    pub log_scale: Tensor,
}

impl Normalization {
    pub fn neutral(nz: usize) -> Self {
        Self {
            shift: Tensor::zeros(&[1, nz]),
            log_scale: Tensor::zeros(&[1, nz]),
        }
    }
}

/// Normalisation followed by an affine coupling
/// `y = u * exp(s(u_pass)) + t(u_pass)` on the transformed half, where
/// `s = bound * tanh(scale_net(.))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    parity: Parity,
    pub norm: Normalization,
    pub scale_net: Mlp,
    pub translate_net: Mlp,
    pub scale_bound: Tensor,
}

impl CouplingLayer {
    pub fn parity(&self) -> Parity {
        self.parity
    }

    fn masks(&self, nz: usize) -> (Tensor, Tensor) {
        let pass: Vec<f64> = (0..nz).map(|i| if self.parity.passes(i) { 1.0 } else { 0.0 }).collect();
        let transformed = pass.iter().map(|p| 1.0 - p).collect();
        (
            Tensor::from_vec(&[1, nz], pass).expect("mask"),
            Tensor::from_vec(&[1, nz], transformed).expect("mask"),
        )
    }
}

/// RealNVP sampler `z = g(eps)`, `eps ~ N(0, I)`, with exact log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSampler {
    spec: FlowSpec,
    layers: Vec<CouplingLayer>,
}

impl FlowSampler {
    /// Identity-initialised flow: coupling output layers are zero and the
    /// normalisations neutral, so `g(eps) = eps` until trained.
    pub fn new(spec: FlowSpec, rng: &mut SeededRng) -> Self {
        let mut flow = Self::randomized(spec, rng);
        for layer in &mut flow.layers {
            layer.scale_net.zero_output_layer();
            layer.translate_net.zero_output_layer();
            layer.norm = Normalization::neutral(spec.nz);
        }
        flow
    }

    /// Every parameter random, including the normalisations. For tests of
    /// invertibility and log-determinants.
    pub fn randomized(spec: FlowSpec, rng: &mut SeededRng) -> Self {
        let nz = spec.nz;
        let layers = (0..spec.layers)
            .map(|i| {
                let scale_spec =
                    MlpSpec::with_hidden(nz, &[spec.hidden, spec.hidden], nz, Activation::Relu).expect("valid widths");
                let translate_spec =
                    MlpSpec::with_hidden(nz, &[spec.hidden, spec.hidden], nz, Activation::Tanh).expect("valid widths");
                let mut noise = |scale: f64| {
                    Tensor::from_vec(&[1, nz], (0..nz).map(|_| scale * rng.normal()).collect()).expect("shape")
                };
                let norm = Normalization {
                    shift: noise(0.3),
                    log_scale: noise(0.2),
                };
                CouplingLayer {
                    parity: if i % 2 == 0 { Parity::Even } else { Parity::Odd },
                    norm,
                    scale_net: Mlp::new(scale_spec, rng),
                    translate_net: Mlp::new(translate_spec, rng),
                    scale_bound: Tensor::scalar(1.0),
                }
            })
            .collect();
        Self { spec, layers }
    }

    pub fn spec(&self) -> FlowSpec {
        self.spec
    }

    pub fn nz(&self) -> usize {
        self.spec.nz
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    /// Parameters updated by training (coupling networks and scale bounds),
    /// in [`BoundFlow::trainable_vars`] order.
    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.scale_net.parameters_mut());
            out.extend(l.translate_net.parameters_mut());
            out.push(&mut l.scale_bound);
        }
        out
    }

    pub fn trainable_parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.scale_net.layers().iter().flat_map(|x| [&x.weight, &x.bias]));
            out.extend(l.translate_net.layers().iter().flat_map(|x| [&x.weight, &x.bias]));
            out.push(&l.scale_bound);
        }
        out
    }

    /// Normalisations are always constants; the remaining parameters are
    /// gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFlow {
        let nz = self.spec.nz;
        let blocks = self
            .layers
            .iter()
            .map(|l| {
                let (pass, trans) = l.masks(nz);
                let scale_net = l.scale_net.bind(g, trainable);
                let translate_net = l.translate_net.bind(g, trainable);
                let bound = if trainable {
                    g.param(&l.scale_bound)
                } else {
                    g.constant(l.scale_bound.clone())
                };
                BoundBlock {
                    shift: g.constant(l.norm.shift.clone()),
                    log_scale: g.constant(l.norm.log_scale.clone()),
                    scale_net,
                    translate_net,
                    bound,
                    pass: g.constant(pass),
                    trans: g.constant(trans),
                }
            })
            .collect();
        BoundFlow { nz, blocks }
    }

    /// Binds from handles in [`Parameterized::named_parameters`] order.
    pub fn bind_vars(&self, g: &mut Graph, vars: &[Var]) -> Result<BoundFlow> {
        let nz = self.spec.nz;
        let mut it = vars.iter().copied();
        let mut blocks = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (pass, trans) = l.masks(nz);
            let mut take = |n: usize| -> Result<Vec<Var>> {
                let v: Vec<Var> = it.by_ref().take(n).collect();
                if v.len() == n {
                    Ok(v)
                } else {
                    Err(Error::DimensionMismatch {
                        expected: n,
                        got: v.len(),
                    })
                }
            };
            let norm = take(2)?;
            let sn = take(2 * l.scale_net.layers().len())?;
            let tn = take(2 * l.translate_net.layers().len())?;
            let bound = take(1)?[0];
            blocks.push(BoundBlock {
                shift: norm[0],
                log_scale: norm[1],
                scale_net: l.scale_net.bind_vars(&sn)?,
                translate_net: l.translate_net.bind_vars(&tn)?,
                bound,
                pass: g.constant(pass),
                trans: g.constant(trans),
            });
        }
        Ok(BoundFlow { nz, blocks })
    }

    /// `(z, log|det dz/deps|)` without gradients.
    pub fn forward_values(&self, eps: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let e = g.constant(eps.clone());
        let (z, ld) = b.forward(&mut g, e)?;
        Ok((g.value(z).clone(), g.value(ld).data().to_vec()))
    }

    /// `(eps, log|det deps/dz|)` without gradients.
    pub fn inverse_values(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let (e, ld) = b.inverse(&mut g, zv)?;
        Ok((g.value(e).clone(), g.value(ld).data().to_vec()))
    }

    /// `log p_g(z)` per row.
    pub fn log_pdf_values(&self, z: &Tensor) -> Result<Vec<f64>> {
        let (eps, ld) = self.inverse_values(z)?;
        Ok(gauss::standard_log_pdf_rows(&eps)
            .into_iter()
            .zip(ld)
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Sets each block's normalisation to standardise the activations it
    /// receives when `eps` is pushed forward (data-dependent init for the
    /// sampling direction).
    pub fn init_normalization_from_base(&mut self, eps: &Tensor) -> Result<()> {
        let nz = self.spec.nz;
        let mut h = eps.clone();
        for i in 0..self.layers.len() {
            let (mean, std) = column_stats(&h);
            self.layers[i].norm = Normalization {
                shift: Tensor::from_vec(&[1, nz], mean)?,
                log_scale: Tensor::from_vec(&[1, nz], std.iter().map(|s| s.ln()).collect())?,
            };
            let single = Self {
                spec: FlowSpec { layers: 1, ..self.spec },
                layers: alloc::vec![self.layers[i].clone()],
            };
            h = single.forward_values(&h)?.0;
        }
        Ok(())
    }

    /// Sets the normalisation nearest the data side so that the inverse
    /// pass standardises `z`; the others become neutral (data-dependent
    /// init for density estimation).
    pub fn init_normalization_from_data(&mut self, z: &Tensor) -> Result<()> {
        let nz = self.spec.nz;
        for l in &mut self.layers {
            l.norm = Normalization::neutral(nz);
        }
        let (mean, std) = column_stats(z);
        if let Some(last) = self.layers.last_mut() {
            last.norm = Normalization {
                shift: Tensor::from_vec(&[1, nz], mean.iter().zip(&std).map(|(m, s)| -m / s).collect())?,
                log_scale: Tensor::from_vec(&[1, nz], std.iter().map(|s| -s.ln()).collect())?,
            };
        }
        Ok(())
    }
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let mean = x.column_means();
    let n = x.rows().max(2) as f64;
    let mut var = alloc::vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for ((v, m), xv) in var.iter_mut().zip(&mean).zip(x.row(r)) {
            *v += (xv - m) * (xv - m);
        }
    }
    let std = var.iter().map(|v| (v / (n - 1.0)).sqrt().max(1e-6)).collect();
    (mean, std)
}

impl Parameterized for FlowSampler {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.norm.shift"), &l.norm.shift));
            out.push((format!("layers.{i}.norm.log_scale"), &l.norm.log_scale));
            out.extend(l.scale_net.named_parameters(&format!("layers.{i}.scale.")));
            out.extend(l.translate_net.named_parameters(&format!("layers.{i}.translate.")));
            out.push((format!("layers.{i}.scale_bound"), &l.scale_bound));
        }
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.norm.shift"), &mut l.norm.shift));
            out.push((format!("layers.{i}.norm.log_scale"), &mut l.norm.log_scale));
            out.extend(l.scale_net.named_parameters_mut(&format!("layers.{i}.scale.")));
            out.extend(l.translate_net.named_parameters_mut(&format!("layers.{i}.translate.")));
            out.push((format!("layers.{i}.scale_bound"), &mut l.scale_bound));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct BoundBlock {
    shift: Var,
    log_scale: Var,
    scale_net: BoundMlp,
    translate_net: BoundMlp,
    bound: Var,
    pass: Var,
    trans: Var,
}

impl BoundBlock {
    /// `(s, t)` conditioned on the pass-through coordinates of `u`, both
    /// zero on those coordinates.
    fn scale_translate(&self, g: &mut Graph, u: Var) -> Result<(Var, Var)> {
        let xb = g.mul(u, self.pass)?;
        let raw = self.scale_net.forward(g, xb)?;
        let squashed = g.tanh(raw);
        let bounded = g.mul(squashed, self.bound)?;
        let s = g.mul(bounded, self.trans)?;
        let t_raw = self.translate_net.forward(g, xb)?;
        let t = g.mul(t_raw, self.trans)?;
        Ok((s, t))
    }
}

/// A [`FlowSampler`] registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundFlow {
    nz: usize,
    blocks: Vec<BoundBlock>,
}

impl BoundFlow {
    /// Handles matching [`FlowSampler::trainable_parameters_mut`].
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.scale_net.vars());
            out.extend(b.translate_net.vars());
            out.push(b.bound);
        }
        out
    }

    fn check(&self, g: &Graph, x: Var) -> Result<()> {
        let w = g.value(x).cols();
        if g.shape(x).len() != 2 || w != self.nz {
            return Err(Error::DimensionMismatch {
                expected: self.nz,
                got: w,
            });
        }
        Ok(())
    }

    fn accumulate(g: &mut Graph, total: Option<Var>, term: Var) -> Result<Option<Var>> {
        Ok(Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        }))
    }

    fn zero_logdet(g: &mut Graph, rows: usize, total: Option<Var>) -> Var {
        total.unwrap_or_else(|| g.constant(Tensor::zeros(&[rows, 1])))
    }

    /// `z = g(eps)` and per-row `log|det dz/deps|` (`[B, 1]`).
    pub fn forward(&self, g: &mut Graph, eps: Var) -> Result<(Var, Var)> {
        self.check(g, eps)?;
        let rows = g.value(eps).rows();
        let mut h = eps;
        let mut logdet = None;
        for b in &self.blocks {
            let centered = g.sub(h, b.shift)?;
            let neg_ls = g.neg(b.log_scale);
            let inv_scale = g.exp(neg_ls);
            let u = g.mul(centered, inv_scale)?;
            let (s, t) = b.scale_translate(g, u)?;
            let es = g.exp(s);
            let ue = g.mul(u, es)?;
            h = g.add(ue, t)?;
            let ld_norm = g.sum(neg_ls);
            let ld_c = g.sum_rows(s);
            let ld = g.add(ld_c, ld_norm)?;
            logdet = Self::accumulate(g, logdet, ld)?;
        }
        let ld = Self::zero_logdet(g, rows, logdet);
        Ok((h, ld))
    }

    /// `eps = g^{-1}(z)` and per-row `log|det deps/dz|` (`[B, 1]`).
    pub fn inverse(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        self.check(g, z)?;
        let rows = g.value(z).rows();
        let mut h = z;
        let mut logdet = None;
        for b in self.blocks.iter().rev() {
            let (s, t) = b.scale_translate(g, h)?;
            let shifted = g.sub(h, t)?;
            let neg_s = g.neg(s);
            let es = g.exp(neg_s);
            let u = g.mul(shifted, es)?;
            let scale = g.exp(b.log_scale);
            let us = g.mul(u, scale)?;
            h = g.add(us, b.shift)?;
            let ld_c = g.sum_rows(neg_s);
            let ld_norm = g.sum(b.log_scale);
            let ld = g.add(ld_c, ld_norm)?;
            logdet = Self::accumulate(g, logdet, ld)?;
        }
        let ld = Self::zero_logdet(g, rows, logdet);
        Ok((h, ld))
    }

    /// `log p_g(z) = log N(g^{-1}(z); 0, I) + log|det deps/dz|`, `[B, 1]`.
    pub fn log_pdf(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let (eps, ld) = self.inverse(g, z)?;
        let base = gauss::standard_log_pdf(g, eps);
        g.add(base, ld)
    }
}
