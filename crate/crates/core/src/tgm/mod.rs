//! Thermal generative module: conditional satellite-to-thermal translation
//! trained with a least-squares GAN objective plus weighted L1.
//!
//! The discriminator minimizes
//! `1/2 E[(D(real) - b)^2] + 1/2 E[(D(G(x)) - a)^2]`; the generator minimizes
//! `E[(D(G(x)) - c)^2] + lambda1 * E[|G(x) - y|]`. The generator objective
//! carries no 1/2 factor. Labels default to a=0 (fake), b=1 (real), c=1.

mod model;
mod train;

pub use model::{PatchDiscriminator, UNet};
pub use train::{generate_dataset, train_tgm, TgmModel, TgmTrainStats};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum TgmError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (epoch {epoch}); aborting")]
    DivergedLoss { step: usize, epoch: usize },
    #[error("config: {0}")]
    BadConfig(String),
    #[error("crop is {got}px, config expects {want}px")]
    BadCropSize { got: usize, want: usize },
    #[error("satellite tile must have 3 channels, got {0}")]
    NotSatellite(usize),
    #[error(transparent)]
    Enhance(#[from] crate::enhance::EnhanceError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TgmConfig {
    /// L1 weight; 100.0 is the default, 10.0 the ablation alternative.
    pub lambda1: f64,
    /// LSGAN label for fake samples (a).
    pub label_fake: f64,
    /// LSGAN label for real samples (b).
    pub label_real: f64,
    /// Label the generator drives the discriminator toward (c).
    pub label_target: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear learning-rate decay toward zero starts at this epoch.
    pub decay_start_epoch: usize,
    /// Inputs are upsampled to this resolution for the networks.
    pub train_resolution: usize,
    /// Generated thermal tiles are downsampled back to this resolution.
    pub output_resolution: usize,
    /// Train against contrast-enhanced thermal targets, so the generator
    /// emits enhanced-domain thermal images.
    pub use_ce_inputs: bool,
    pub ce_factor: f64,
    pub seed: u64,
    /// U-Net encoder/decoder depth (number of stride-2 stages).
    pub unet_depth: usize,
    pub unet_base_width: usize,
    /// Stride-2 stages in the patch discriminator.
    pub disc_layers: usize,
    pub disc_base_width: usize,
}

impl TgmConfig {
    /// Paper-scale preset: 512 px crops upsampled to 1024, pix2pix-sized
    /// networks, 40 epochs with decay from epoch 20.
    pub fn paper_scale() -> Self {
        TgmConfig {
            lambda1: 100.0,
            label_fake: 0.0,
            label_real: 1.0,
            label_target: 1.0,
            epochs: 40,
            batch_size: 8,
            learning_rate: 2e-4,
            decay_start_epoch: 20,
            train_resolution: 1024,
            output_resolution: 512,
            use_ce_inputs: false,
            ce_factor: crate::enhance::DEFAULT_CE_FACTOR,
            seed: 0,
            unet_depth: 8,
            unet_base_width: 64,
            disc_layers: 3,
            disc_base_width: 64,
        }
    }

    /// Desk-scale preset for 64 px synthetic crops on CPU.
    pub fn desk(crop: usize) -> Self {
        TgmConfig {
            epochs: 10,
            decay_start_epoch: 5,
            batch_size: 4,
            train_resolution: crop,
            output_resolution: crop,
            unet_depth: 4,
            unet_base_width: 16,
            disc_layers: 2,
            disc_base_width: 16,
            ..Self::paper_scale()
        }
    }

    pub fn validate(&self) -> Result<(), TgmError> {
        if self.lambda1 < 0.0 {
            return Err(TgmError::BadConfig(format!("lambda1 {} < 0", self.lambda1)));
        }
        if self.epochs < self.decay_start_epoch {
            return Err(TgmError::BadConfig(format!(
                "epochs {} < decay_start_epoch {}",
                self.epochs, self.decay_start_epoch
            )));
        }
        if self.train_resolution < self.output_resolution {
            return Err(TgmError::BadConfig(format!(
                "train_resolution {} < output_resolution {}",
                self.train_resolution, self.output_resolution
            )));
        }
        if self.train_resolution % (1 << self.unet_depth) != 0 {
            return Err(TgmError::BadConfig(format!(
                "train_resolution {} not divisible by 2^{}",
                self.train_resolution, self.unet_depth
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TgmError::BadConfig("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    /// Learning-rate factor for an epoch: 1 before the decay start, then a
    /// linear ramp that reaches 0 at `epochs`.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start_epoch {
            1.0
        } else {
            let span = (self.epochs - self.decay_start_epoch).max(1) as f64;
            1.0 - (epoch - self.decay_start_epoch) as f64 / span
        }
    }
}

fn ensure_finite(t: &Tensor, what: &'static str) -> Result<(), TgmError> {
    if !t.is_finite() {
        return Err(TgmError::NonFinite(what));
    }
    Ok(())
}

/// Discriminator objective:
/// `1/2 mean((scores_real - b)^2) + 1/2 mean((scores_fake - a)^2)`.
/// The two grids may have different shapes; the means are independent.
pub fn lsgan_d_loss(
    scores_real: &Tensor,
    scores_fake: &Tensor,
    a: f64,
    b: f64,
) -> Result<f64, TgmError> {
    ensure_finite(scores_real, "scores_real")?;
    ensure_finite(scores_fake, "scores_fake")?;
    let mse = |t: &Tensor, label: f64| {
        t.data().iter().map(|v| (v - label) * (v - label)).sum::<f64>() / t.numel() as f64
    };
    Ok(0.5 * mse(scores_real, b) + 0.5 * mse(scores_fake, a))
}

/// Generator adversarial objective: `mean((scores_fake - c)^2)`, no 1/2.
pub fn lsgan_g_loss(scores_fake: &Tensor, c: f64) -> Result<f64, TgmError> {
    ensure_finite(scores_fake, "scores_fake")?;
    Ok(scores_fake.data().iter().map(|v| (v - c) * (v - c)).sum::<f64>()
        / scores_fake.numel() as f64)
}

/// Mean absolute difference over all pixels.
pub fn l1_loss(generated: &Tensor, target: &Tensor) -> Result<f64, TgmError> {
    if generated.shape() != target.shape() {
        return Err(TgmError::ShapeMismatch(
            generated.shape().to_vec(),
            target.shape().to_vec(),
        ));
    }
    ensure_finite(generated, "generated")?;
    ensure_finite(target, "target")?;
    Ok(generated
        .data()
        .iter()
        .zip(target.data())
        .map(|(g, t)| (g - t).abs())
        .sum::<f64>()
        / generated.numel() as f64)
}
