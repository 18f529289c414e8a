//! Command line, configuration, checkpoints and experiment drivers for the
//! `evalp-core` two-stage latent prior.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
