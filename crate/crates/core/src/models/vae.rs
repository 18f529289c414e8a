use alloc::string::String;
use alloc::vec::Vec;

use super::mlp::{Activation, BoundMlp, Mlp, MlpSpec};
use super::Parameterized;
use crate::diff::{sigmoid, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gauss::{LN_2PI, LOGVAR_MAX, LOGVAR_MIN};
use crate::rng::SeededRng;

/// Likelihood `p(x|z)` attached to the decoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ObservationModel {
    /// `N(x; decoder(z), I)`.
    GaussianFixed,
    /// Independent Bernoulli with logits `decoder(z)`.
    Bernoulli,
}

impl ObservationModel {
    /// Per-row `log p(x|params)`, shape `[B, 1]`.
    pub fn log_likelihood(self, g: &mut Graph, x: Var, params: Var) -> Result<Var> {
        match self {
            Self::GaussianFixed => {
                let d = g.value(x).cols() as f64;
                let diff = g.sub(x, params)?;
                let sq = g.square(diff);
                let rows = g.sum_rows(sq);
                let scaled = g.scale(rows, -0.5);
                Ok(g.add_scalar(scaled, -0.5 * d * LN_2PI))
            }
            Self::Bernoulli => {
                // x * l - softplus(l)
                let xl = g.mul(x, params)?;
                let sp = g.softplus(params);
                let ll = g.sub(xl, sp)?;
                Ok(g.sum_rows(ll))
            }
        }
    }

    /// Mean of `p(x|params)`.
    pub fn mean(self, params: &Tensor) -> Tensor {
        match self {
            Self::GaussianFixed => params.clone(),
            Self::Bernoulli => params.map(sigmoid),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VaeSpec {
    pub data_dim: usize,
    pub nz: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub observation: ObservationModel,
}

impl VaeSpec {
    fn encoder(&self) -> Result<MlpSpec> {
        MlpSpec::with_hidden(self.data_dim, &self.hidden, 2 * self.nz, self.activation)
    }

    fn decoder(&self) -> Result<MlpSpec> {
        let rev: Vec<usize> = self.hidden.iter().rev().copied().collect();
        MlpSpec::with_hidden(self.nz, &rev, self.data_dim, self.activation)
    }
}

/// Encoder `x -> (mu, logvar)` and decoder `z -> observation parameters`.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    spec: VaeSpec,
    encoder: Mlp,
    decoder: Mlp,
}

impl VaeModel {
    pub fn new(spec: VaeSpec, rng: &mut SeededRng) -> Result<Self> {
        if spec.nz == 0 || spec.data_dim == 0 {
            return Err(Error::InvalidConfig(String::from("vae widths must be positive")));
        }
        let encoder = Mlp::new(spec.encoder()?, rng);
        let decoder = Mlp::new(spec.decoder()?, rng);
        Ok(Self { spec, encoder, decoder })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn nz(&self) -> usize {
        self.spec.nz
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    /// Encoder parameters then decoder parameters.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.parameters_mut();
        out.extend(self.decoder.parameters_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundVae {
        BoundVae {
            encoder: self.encoder.bind(g, trainable),
            decoder: self.decoder.bind(g, trainable),
            nz: self.spec.nz,
            observation: self.spec.observation,
        }
    }

    /// Binds from handles in [`VaeModel::parameters_mut`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundVae> {
        let ne = 2 * self.encoder.layers().len();
        if vars.len() < ne {
            return Err(Error::DimensionMismatch {
                expected: ne,
                got: vars.len(),
            });
        }
        Ok(BoundVae {
            encoder: self.encoder.bind_vars(&vars[..ne])?,
            decoder: self.decoder.bind_vars(&vars[ne..])?,
            nz: self.spec.nz,
            observation: self.spec.observation,
        })
    }

    /// `(mu, logvar)` for each row of `x`, without gradients.
    pub fn encode_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (mu, lv) = b.encode(&mut g, xv)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    /// Raw decoder output (Gaussian mean or Bernoulli logits).
    pub fn decode_values(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward_values(z)
    }

    /// Mean of `p(x|z)`, the image of a latent in data space.
    pub fn decode_mean(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.spec.observation.mean(&self.decode_values(z)?))
    }
}

impl Parameterized for VaeModel {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_parameters("encoder.");
        out.extend(self.decoder.named_parameters("decoder."));
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_parameters_mut("encoder.");
        out.extend(self.decoder.named_parameters_mut("decoder."));
        out
    }
}

/// A [`VaeModel`] registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundVae {
    encoder: BoundMlp,
    decoder: BoundMlp,
    nz: usize,
    observation: ObservationModel,
}

impl BoundVae {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v
    }

    pub fn observation(&self) -> ObservationModel {
        self.observation
    }

    /// `(mu, logvar)`, each `[B, nz]`; logvar is clamped like
    /// [`crate::gauss::DiagGaussian`].
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let out = self.encoder.forward(g, x)?;
        let mu = g.slice_cols(out, 0, self.nz)?;
        let raw = g.slice_cols(out, self.nz, 2 * self.nz)?;
        let lv = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, lv))
    }

    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.decoder.forward(g, z)
    }

    /// `log p(x|z)` per row.
    pub fn log_likelihood(&self, g: &mut Graph, x: Var, z: Var) -> Result<Var> {
        let params = self.decode(g, z)?;
        self.observation.log_likelihood(g, x, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck_with;
    use crate::gauss;

    fn spec(obs: ObservationModel) -> VaeSpec {
        VaeSpec {
            data_dim: 4,
            nz: 2,
            hidden: alloc::vec![6],
            activation: Activation::Tanh,
            observation: obs,
        }
    }

    #[test]
    fn shapes_preserved() {
        let mut rng = SeededRng::new(0);
        let m = VaeModel::new(spec(ObservationModel::GaussianFixed), &mut rng).unwrap();
        let x = rng.normal_tensor(7, 4);
        let (mu, lv) = m.encode_values(&x).unwrap();
        assert_eq!(mu.shape(), &[7, 2]);
        assert_eq!(lv.shape(), &[7, 2]);
        assert_eq!(m.decode_values(&mu).unwrap().shape(), &[7, 4]);
        assert!(m.encode_values(&rng.normal_tensor(7, 3)).is_err());
        assert!(m.decode_values(&rng.normal_tensor(7, 3)).is_err());
    }

    #[test]
    fn zero_encoder_emits_bias() {
        let mut rng = SeededRng::new(1);
        let mut m = VaeModel::new(spec(ObservationModel::GaussianFixed), &mut rng).unwrap();
        for l in m.encoder_mut().layers_mut() {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let bias = [0.3, -0.2, 0.5, -1.5];
        m.encoder_mut()
            .layers_mut()
            .last_mut()
            .unwrap()
            .bias
            .data_mut()
            .copy_from_slice(&bias);
        let (mu, lv) = m.encode_values(&rng.normal_tensor(3, 4)).unwrap();
        for r in 0..3 {
            assert_eq!(mu.row(r), &bias[..2]);
            assert_eq!(lv.row(r), &bias[2..]);
        }
    }

    #[test]
    fn gaussian_likelihood_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[alloc::vec![1.0, 2.0]]).unwrap());
        let p = g.constant(Tensor::from_rows(&[alloc::vec![0.0, 0.0]]).unwrap());
        let ll = ObservationModel::GaussianFixed.log_likelihood(&mut g, x, p).unwrap();
        assert!((g.scalar(ll) - (-2.5 - LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_likelihood_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[alloc::vec![1.0, 0.0]]).unwrap());
        let p = g.constant(Tensor::from_rows(&[alloc::vec![0.7, -0.4]]).unwrap());
        let ll = ObservationModel::Bernoulli.log_likelihood(&mut g, x, p).unwrap();
        let expect = sigmoid(0.7).ln() + (1.0 - sigmoid(-0.4)).ln();
        assert!((g.scalar(ll) - expect).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_gradcheck() {
        for obs in [ObservationModel::GaussianFixed, ObservationModel::Bernoulli] {
            let mut rng = SeededRng::new(2);
            let m = VaeModel::new(spec(obs), &mut rng).unwrap();
            let x = rng.normal_tensor(3, 4).map(|v| {
                if obs == ObservationModel::Bernoulli {
                    (v > 0.0) as u8 as f64
                } else {
                    v
                }
            });
            let eps = rng.normal_tensor(3, 2);
            let mut inputs: Vec<Tensor> = m.named_parameters().into_iter().map(|(_, t)| t.clone()).collect();
            let np = inputs.len();
            inputs.push(x);
            inputs.push(eps);
            let mut wrt = alloc::vec![true; np];
            wrt.extend([false, false]);
            let report = gradcheck_with(
                |g, v| {
                    let b = m.bind_vars(&v[..np])?;
                    let (mu, lv) = b.encode(g, v[np])?;
                    let z = gauss::reparameterize(g, mu, lv, v[np + 1])?;
                    let ll = b.log_likelihood(g, v[np], z)?;
                    Ok(g.mean(ll))
                },
                &inputs,
                1e-5,
                &wrt,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{obs:?}: {report:?}");
        }
    }
}
