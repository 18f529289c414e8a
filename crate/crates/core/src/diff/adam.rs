use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Usual defaults (0.9, 0.999); used for VAE training.
    pub fn standard(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// (0.5, 0.9), the common choice for critic/generator games.
    pub fn adversarial(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    shape: Vec<usize>,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            shape: shape.to_vec(),
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != state.shape.as_slice() || grad.len() != param.numel() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: param.shape().to_vec(),
            right: vec![grad.len()],
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "adam gradient",
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            config,
            states: params.into_iter().map(|p| AdamState::new(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }

    /// Applies one update; `params` and `grads` follow construction order.
    ///
    /// Every gradient is validated before any parameter is touched, so a
    /// rejected step leaves the parameters unchanged.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::DimensionMismatch {
                expected: self.states.len(),
                got: params.len().min(grads.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "adam gradient",
            });
        }
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
            adam_step(p, g.data(), s, &self.config)?;
        }
        Ok(())
    }
}
