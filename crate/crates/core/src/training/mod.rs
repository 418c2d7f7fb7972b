//! Training: the three-term L1 objective, Adam, progressive patch sizes,
//! aligned patch sampling and checkpoints.

mod adam;
mod checkpoint;
mod data;
mod loss;
mod trainer;

#[cfg(test)]
mod tests;

pub use adam::{adam_update, clip_global_norm, AdamConfig, OptimState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{patch_sampler, PatchTriple, Sample};
pub use loss::{loss_eq8, loss_eq8_masked, loss_on_tape, LossContext};
pub use trainer::{training_step, StepRecord, Trainer};

use crate::cdformer::ModelConfig;
use crate::{Error, Result};

/// Start of a progressive stage: from `start_epoch` on, crops are
/// `patch_size x patch_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub start_epoch: usize,
    pub patch_size: usize,
}

/// Optimisation and curriculum settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub stages: Vec<Stage>,
    /// First epoch trained on whole images with only the later denoising
    /// blocks and the head updated.
    pub full_res_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 1,
            epochs: 1,
            steps_per_epoch: 1,
            stages: Vec::new(),
            full_res_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("adam_eps must be positive and clip_norm non-negative".into());
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return bad("batch_size and steps_per_epoch must be at least 1".into());
        }
        for w in self.stages.windows(2) {
            if w[1].start_epoch <= w[0].start_epoch {
                return bad("progressive stages must have increasing start epochs".into());
            }
            if w[1].patch_size < w[0].patch_size {
                return bad("progressive patch sizes must not decrease".into());
            }
        }
        if self.stages.iter().any(|s| s.patch_size == 0) {
            return bad("patch sizes must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Spatial extent of the training crops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchSize {
    Crop(usize),
    Full,
}

/// Which parameters receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// The later half of the denoising blocks plus the reconstruction head.
    SecondHalf,
}

impl Trainable {
    pub fn includes(self, cfg: &ModelConfig, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::SecondHalf => {
                if name.starts_with("recon.") {
                    return true;
                }
                let Some(rest) = name.strip_prefix("ds.blocks.") else { return false };
                let idx = rest.split('.').next().and_then(|s| s.parse::<usize>().ok());
                idx.is_some_and(|l| l >= cfg.second_half_start())
            }
        }
    }
}

/// Patch size and trainable subset in force during `epoch`.
pub fn progressive_schedule(cfg: &TrainConfig, epoch: usize) -> (PatchSize, Trainable) {
    if cfg.full_res_epoch.is_some_and(|e| epoch >= e) {
        return (PatchSize::Full, Trainable::SecondHalf);
    }
    let stage = cfg.stages.iter().rev().find(|s| s.start_epoch <= epoch).or(cfg.stages.first());
    match stage {
        Some(s) => (PatchSize::Crop(s.patch_size), Trainable::All),
        None => (PatchSize::Full, Trainable::All),
    }
}
