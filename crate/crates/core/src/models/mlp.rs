use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu,
    None,
}

/// Layer widths `input, hidden..., output` and one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "mlp needs >= 1 layer with positive widths and one activation per layer, got widths {widths:?} activations {}",
                activations.len()
            )));
        }
        Ok(Self { widths, activations })
    }

    /// `input -> hidden[0] -> ... -> output` with `act` on hidden layers and
    /// a linear output layer.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, act: Activation) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut acts = alloc::vec![act; hidden.len()];
        acts.push(Activation::None);
        Self::new(widths, acts)
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(spec: MlpSpec, rng: &mut SeededRng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut uniform = |n| -> Vec<f64> { (0..n).map(|_| rng.uniform_range(-bound, bound)).collect() };
                Linear {
                    weight: Tensor::from_vec(&[w[0], w[1]], uniform(w[0] * w[1])).expect("shape"),
                    bias: Tensor::from_vec(&[1, w[1]], uniform(w[1])).expect("shape"),
                }
            })
            .collect();
        Self { spec, layers }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Self { spec, layers }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    /// Zeroes the last layer so the network outputs exactly 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("validated");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}layers.{i}.weight"), &l.weight));
            out.push((format!("{prefix}layers.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_parameters_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}layers.{i}.weight"), &mut l.weight));
            out.push((format!("{prefix}layers.{i}.bias"), &mut l.bias));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers the parameters on `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if trainable {
                weights.push(g.param(&l.weight));
                biases.push(g.param(&l.bias));
            } else {
                weights.push(g.constant(l.weight.clone()));
                biases.push(g.constant(l.bias.clone()));
            }
        }
        BoundMlp {
            weights,
            biases,
            activations: self.spec.activations.clone(),
            input: self.spec.input(),
        }
    }

    /// Rebuilds a bound network from handles given in `w0, b0, w1, b1, ...`
    /// order, e.g. leaves created by a gradient check.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundMlp> {
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.layers.len(),
                got: vars.len(),
            });
        }
        Ok(BoundMlp {
            weights: vars.iter().step_by(2).copied().collect(),
            biases: vars.iter().skip(1).step_by(2).copied().collect(),
            activations: self.spec.activations.clone(),
            input: self.spec.input(),
        })
    }

    /// Plain forward pass without gradients.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = bound.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

/// An [`Mlp`] whose parameters live on a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    weights: Vec<Var>,
    biases: Vec<Var>,
    activations: Vec<Activation>,
    input: usize,
}

/// Forward pass with the pre-activation of every layer kept.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub output: Var,
    pub preacts: Vec<Var>,
}

pub(crate) fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => g.tanh(x),
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu => g.leaky_relu(x),
        Activation::None => x,
    }
}

impl BoundMlp {
    /// Parameter handles in `w0, b0, w1, b1, ...` order.
    pub fn vars(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_traced(g, x).map(|t| t.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, x: Var) -> Result<MlpTrace> {
        let width = g.value(x).cols();
        if g.shape(x).len() != 2 || width != self.input {
            return Err(Error::DimensionMismatch {
                expected: self.input,
                got: width,
            });
        }
        let mut h = x;
        let mut preacts = Vec::with_capacity(self.weights.len());
        for ((&w, &b), &act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let lin = g.matmul(h, w)?;
            let a = g.add(lin, b)?;
            preacts.push(a);
            h = activate(g, a, act);
        }
        Ok(MlpTrace { output: h, preacts })
    }

    /// Gradient of the sum of the (single) output with respect to the
    /// input rows, built from graph ops so it stays differentiable in the
    /// weights. ReLU-family derivative masks enter as constants (their
    /// second derivative vanishes almost everywhere); tanh derivatives are
    /// kept on the graph.
    pub fn input_gradient(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let trace = self.forward_traced(g, x)?;
        if g.value(trace.output).cols() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: g.value(trace.output).cols(),
            });
        }
        let mut delta: Option<Var> = None;
        for k in (0..self.weights.len()).rev() {
            let a = trace.preacts[k];
            let mask = activation_derivative(g, a, self.activations[k]);
            let upstream = match delta {
                None => mask,
                Some(d) => g.mul(d, mask)?,
            };
            let wt = g.transpose(self.weights[k])?;
            delta = Some(g.matmul(upstream, wt)?);
        }
        Ok(delta.expect("at least one layer"))
    }
}

fn activation_derivative(g: &mut Graph, a: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => {
            let t = g.tanh(a);
            let t2 = g.square(t);
            let n = g.neg(t2);
            g.add_scalar(n, 1.0)
        }
        Activation::Relu => {
            let m = g.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            g.constant(m)
        }
        Activation::LeakyRelu => {
            let m = g.value(a).map(crate::diff::leaky_relu_grad);
            g.constant(m)
        }
        Activation::None => {
            let m = g.value(a).map(|_| 1.0);
            g.constant(m)
        }
    }
}
