//! Energy-based variational latent priors for VAEs.
//!
//! A two-stage pipeline: a VAE is trained first, then an energy-tilted
//! Gaussian prior `p(z) ∝ exp(-f(z)) N(z; 0, I)` is learned jointly with a
//! RealNVP sampler through an alternating critic/sampler optimisation in
//! latent space. Generation either pushes Gaussian noise through the
//! sampler or resamples sampler proposals with energy-based importance
//! weights.
//!
//! The crate is `no_std` (with `alloc`) and purely computational. File
//! formats, configuration and the command line live in the `evalp` crate.

#![no_std]
#![deny(unsafe_code)]
// `num_traits::Float` supplies libm-backed float methods; builds where std is
// linked (tests, doctests with dev-dependencies) resolve them to inherent
// methods and would flag the import.
#![allow(unused_imports)]
// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod diff;
pub mod error;
pub mod gauss;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod sampling;
pub mod stage1;
pub mod stage2;

pub use diff::{Adam, AdamConfig, AdamState, Graph, Tensor, Var};
pub use error::{Error, Result};
pub use rng::SeededRng;
