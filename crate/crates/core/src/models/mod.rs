//! Network definitions: MLP blocks, the energy function, the RealNVP
//! sampler and the VAE encoder/decoder pair.

mod energy;
mod flow;
mod mlp;
mod vae;

use alloc::string::String;
use alloc::vec::Vec;

pub use energy::{BoundEnergy, EnergyFunction};
pub use flow::{BoundFlow, CouplingLayer, FlowSampler, FlowSpec, Normalization, Parity};
pub use mlp::{Activation, BoundMlp, Linear, Mlp, MlpSpec};
pub use vae::{BoundVae, ObservationModel, VaeModel, VaeSpec};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Named access to a model's parameter tensors, in a fixed order.
pub trait Parameterized {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;
    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Overwrites every parameter from `(name, tensor)` pairs given in
    /// [`Parameterized::named_parameters`] order. Names and shapes must match.
    fn load_parameters(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let slots = self.named_parameters_mut();
        if slots.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: slots.len(),
                got: values.len(),
            });
        }
        for ((name, slot), (vname, value)) in slots.into_iter().zip(values) {
            if &name != vname || slot.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_parameters",
                    left: slot.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            *slot = value.clone();
        }
        Ok(())
    }
}
