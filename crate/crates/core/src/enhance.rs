//! Linear-scaling contrast enhancement for thermal images.
//!
//! `out = clip(mean + factor * (x - mean), 0, 1)` with the per-image scalar
//! mean as pivot. One global switch: the same enhancement applies to real
//! thermal training images, to generated thermal images (via the generator
//! trained on enhanced targets), and to queries at inference time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagebuf::ImageBuf;

pub const DEFAULT_CE_FACTOR: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("contrast factor must be > 0, got {0}")]
    BadFactor(f64),
    #[error("input contains a non-finite pixel at index {0}")]
    NonFinite(usize),
    #[error("contrast enhancement expects a 1-channel image, got {0} channels")]
    NotThermal(usize),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CeConfig {
    pub enabled: bool,
    pub factor: f64,
}

impl Default for CeConfig {
    fn default() -> Self {
        CeConfig { enabled: false, factor: DEFAULT_CE_FACTOR }
    }
}

impl CeConfig {
    pub fn validate(&self) -> Result<(), EnhanceError> {
        if self.factor <= 0.0 {
            return Err(EnhanceError::BadFactor(self.factor));
        }
        Ok(())
    }

    /// Apply the enhancement if enabled; identity otherwise.
    pub fn apply(&self, img: &ImageBuf) -> Result<ImageBuf, EnhanceError> {
        if self.enabled {
            contrast_enhance(img, self.factor)
        } else {
            Ok(img.clone())
        }
    }
}

/// Scale pixel deviations from the per-image mean by `factor` and clip to
/// [0, 1]. A factor of exactly 1 returns the input unchanged.
pub fn contrast_enhance(img: &ImageBuf, factor: f64) -> Result<ImageBuf, EnhanceError> {
    if factor <= 0.0 {
        return Err(EnhanceError::BadFactor(factor));
    }
    img.ensure_channels(1).map_err(|_| EnhanceError::NotThermal(img.channels()))?;
    if let Some(i) = img.data().iter().position(|v| !v.is_finite()) {
        return Err(EnhanceError::NonFinite(i));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let mean = img.mean();
    Ok(img.map(|v| (mean + factor * (v - mean)).clamp(0.0, 1.0)))
}
