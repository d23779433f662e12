//! Desk-scale latent-diffusion super-resolution with two LR-conditioned control branches
//! and sampler-time latent space adjustment.

pub mod backbone;
pub mod cli;
pub mod control;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod probe;
pub mod sampler;
pub mod schedule;
pub mod selftest;
pub mod store;
pub mod train;
pub mod vae;
pub mod wxattn;

pub use controlsr_tensor as tensor;
pub use error::{Error, Result};
pub use params::{Param, ParamStore};
