//! Hyperspectral super-resolution by conditional diffusion.
//!
//! A low-resolution hyperspectral cube `Y` and a high-resolution multispectral
//! image `X` are fused into a high-resolution hyperspectral estimate `Z` by
//! iterative denoising. The denoiser is a two-stream spatio-spectral
//! transformer trained with an L1 objective that combines the observation
//! model with a direct reconstruction term.
//!
//! Module map:
//! - [`numerics`]: tensors with reverse-mode differentiation and a seeded RNG.
//! - [`schedule`]: noise schedules, forward/posterior diffusion maths and the sampler.
//! - [`degradation`]: the observation model, synthetic scenes and cube files.
//! - [`cdformer`]: the conditional denoising transformer.
//! - [`training`]: loss, Adam, progressive patch training and checkpoints.
//! - [`metrics`]: PSNR, SSIM, SAM and ERGAS.
//! - [`config`]: the `key = value` run configuration.

pub mod cdformer;
pub mod config;
pub mod degradation;
mod error;
pub mod metrics;
pub mod numerics;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
