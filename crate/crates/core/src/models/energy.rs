use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::mlp::{Activation, BoundMlp, Mlp, MlpSpec};
use super::Parameterized;
use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Scalar energy `f(z)`; the tilted prior is `exp(-f(z)) N(z; 0, I) / Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyFunction {
    mlp: Mlp,
}

impl EnergyFunction {
    /// `nz -> nd (leaky ReLU) -> nd (leaky ReLU) -> 1`.
    pub fn new(nz: usize, nd: usize, rng: &mut SeededRng) -> Self {
        let spec = MlpSpec::with_hidden(nz, &[nd, nd], 1, Activation::LeakyRelu).expect("valid widths");
        Self {
            mlp: Mlp::new(spec, rng),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.spec().output() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: mlp.spec().output(),
            });
        }
        Ok(Self { mlp })
    }

    /// `f(z) = w . z + b`.
    pub fn linear(w: &[f64], b: f64) -> Self {
        let spec = MlpSpec::new(vec![w.len(), 1], vec![Activation::None]).expect("valid");
        let mut mlp = Mlp::zeros(spec);
        let layer = &mut mlp.layers_mut()[0];
        layer.weight.data_mut().copy_from_slice(w);
        layer.bias.data_mut()[0] = b;
        Self { mlp }
    }

    /// Two-hidden-layer network with all weights zero and output bias `c`,
    /// so `f(z) = c` everywhere.
    pub fn constant(nz: usize, nd: usize, c: f64) -> Self {
        let spec = MlpSpec::with_hidden(nz, &[nd, nd], 1, Activation::LeakyRelu).expect("valid widths");
        let mut mlp = Mlp::zeros(spec);
        mlp.layers_mut().last_mut().expect("layers").bias.data_mut()[0] = c;
        Self { mlp }
    }

    pub fn nz(&self) -> usize {
        self.mlp.spec().input()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEnergy {
        BoundEnergy(self.mlp.bind(g, trainable))
    }

    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundEnergy> {
        Ok(BoundEnergy(self.mlp.bind_vars(vars)?))
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.parameters_mut()
    }

    /// Energies of the rows of `z`.
    pub fn evaluate(&self, z: &Tensor) -> Result<Vec<f64>> {
        Ok(self.mlp.forward_values(z)?.into_data())
    }
}

impl Parameterized for EnergyFunction {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named_parameters("")
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.mlp.named_parameters_mut("")
    }
}

/// An [`EnergyFunction`] registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundEnergy(BoundMlp);

impl BoundEnergy {
    pub fn vars(&self) -> Vec<Var> {
        self.0.vars()
    }

    /// `f(z)` per row, shape `[B, 1]`.
    pub fn energy(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.0.forward(g, z)
    }

    /// `∇_z f(z)` per row, shape `[B, nz]`, differentiable in the energy's
    /// parameters.
    pub fn input_grad(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.0.input_gradient(g, z)
    }
}
