//! The conditional denoising transformer.
//!
//! Two streams share one spatial grid. The SR stream embeds the upsampled
//! low-resolution cube together with the multispectral image and refines it
//! with spatio-spectral transformer layers. The denoising stream embeds the
//! noisy state and, at every depth, merges the noise-level embedding and
//! cross-attends to the SR features of the same depth. A 3x3 convolution maps
//! the final features back to bands and adds a residual anchor.

mod layers;
mod model;
mod params;


pub use layers::{
    gated_ffn, nc_s2tl, noise_level_embedding, s2tl, spatio_msa, spectral_msa, window_attention, Attention,
};
pub use model::{denoise, denoise_on_tape, ds_stream, sr_stream, CachedDenoiser, Precision};
pub use params::{Bound, ModelParams, ParamTensor};

use crate::{Error, Result};

/// Expansion ratio of the gated feed-forward network.
pub const FFN_RATIO: usize = 2;
/// Default multiplier applied to the noise level before the sinusoids.
pub const DEFAULT_NLE_SCALE: f64 = 5000.0;

/// What the reconstruction head adds its output to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Residual {
    /// The bilinearly upsampled low-resolution cube.
    #[default]
    Upsampled,
    /// The noisy state itself.
    Noisy,
}

impl Residual {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "upsampled" => Ok(Residual::Upsampled),
            "zt" => Ok(Residual::Noisy),
            _ => Err(Error::invalid(format!("unknown residual anchor `{s}` (expected upsampled or zt)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Residual::Upsampled => "upsampled",
            Residual::Noisy => "zt",
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    /// Transformer layers per stream.
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub bands: usize,
    pub msi_bands: usize,
    pub nle_scale: f64,
    pub residual: Residual,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            layers: 4,
            heads: 4,
            window: 8,
            bands: 31,
            msi_bands: 3,
            nle_scale: DEFAULT_NLE_SCALE,
            residual: Residual::Upsampled,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad(format!("channels must be a positive even number, got {}", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.bands == 0 || self.msi_bands == 0 {
            return bad("band counts must be positive".into());
        }
        if !(self.nle_scale.is_finite() && self.nle_scale > 0.0) {
            return bad(format!("nle_scale must be positive, got {}", self.nle_scale));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Index of the first denoising block updated during full-resolution
    /// training (the later half, rounded up).
    pub fn second_half_start(&self) -> usize {
        self.layers - self.layers.div_ceil(2)
    }
}
