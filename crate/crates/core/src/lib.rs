//! Burst super-resolution by skip-started diffusion.
//!
//! The crate is organised bottom-up: [`tensor`], [`rng`] and [`resample`]
//! are the numeric substrate; [`burst`] simulates RAW bursts and
//! [`baseline`] reconstructs the deterministic initial image; [`schedules`],
//! [`denoiser`] and [`samplers`] implement the reverse process started from
//! that image; [`distill`] turns the multi-step sampler into a one-step
//! consistency student; [`metrics`] and [`experiment`] evaluate it all.

pub mod baseline;
pub mod burst;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod resample;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{gaussian_noise, RngStream};
pub use tensor::Tensor;
