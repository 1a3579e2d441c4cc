//! Procedural co-registered satellite/thermal map pairs.
//!
//! A value-noise heightfield is thresholded into four terrain classes
//! (desert, farm, road, building) with area fractions from the spec'd mix.
//! The satellite map colors each class with smooth variation; the thermal
//! map is a class-dependent affine function of satellite luminance, rescaled
//! around 0.5 by a contrast knob, plus optional Gaussian noise. Everything
//! is keyed by (seed, pixel index) through a counter-based generator, so
//! worlds are bit-reproducible across platforms and parallel row generation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::RasterMap;
use crate::imagebuf::ImageBuf;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("terrain_mix sums to {0}, expected 1")]
    BadMix(f64),
    #[error("thermal_contrast {0} outside (0, 1]")]
    BadContrast(f64),
    #[error("thermal_noise_std must be >= 0, got {0}")]
    BadNoise(f64),
    #[error("size must be positive, got {0}x{1}")]
    BadSize(usize, usize),
}

/// Terrain classes in mix order.
const N_CLASSES: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    /// (height, width) in pixels.
    pub size_px: (usize, usize),
    pub meters_per_pixel: f64,
    /// Fractions of {desert, farm, road, building}; must sum to 1.
    pub terrain_mix: [f64; N_CLASSES],
    pub thermal_noise_std: f64,
    /// In (0, 1]; 1 keeps full contrast, smaller values flatten the thermal
    /// channel around 0.5.
    pub thermal_contrast: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            size_px: (256, 256),
            meters_per_pixel: 1.0,
            terrain_mix: [0.7, 0.15, 0.1, 0.05],
            thermal_noise_std: 0.02,
            thermal_contrast: 1.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let sum: f64 = self.terrain_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::BadMix(sum));
        }
        if !(self.thermal_contrast > 0.0 && self.thermal_contrast <= 1.0) {
            return Err(SynthError::BadContrast(self.thermal_contrast));
        }
        if self.thermal_noise_std < 0.0 {
            return Err(SynthError::BadNoise(self.thermal_noise_std));
        }
        if self.size_px.0 == 0 || self.size_px.1 == 0 {
            return Err(SynthError::BadSize(self.size_px.0, self.size_px.1));
        }
        Ok(())
    }
}

/// splitmix64: counter-based, keyed hash to uniform u64.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform in [0, 1) keyed by (seed, stream, index).
fn keyed_uniform(seed: u64, stream: u64, index: u64) -> f64 {
    let h = mix64(seed ^ mix64(stream.wrapping_mul(0x100000001b3) ^ index));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Standard normal keyed by (seed, stream, index) via Box-Muller.
fn keyed_normal(seed: u64, stream: u64, index: u64) -> f64 {
    let u1 = keyed_uniform(seed, stream, index).max(1e-300);
    let u2 = keyed_uniform(seed, stream ^ 0x5bf0_3635, index);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn smoothstep(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Multi-octave value noise in [0, 1] on lattice points keyed by the seed.
fn value_noise(seed: u64, stream: u64, x: f64, y: f64, octaves: u32, base_cell: f64) -> f64 {
    let mut total = 0.0;
    let mut amplitude = 1.0;
    let mut norm = 0.0;
    let mut cell = base_cell;
    for oct in 0..octaves {
        let gx = x / cell;
        let gy = y / cell;
        let x0 = gx.floor();
        let y0 = gy.floor();
        let tx = smoothstep(gx - x0);
        let ty = smoothstep(gy - y0);
        let lattice = |ix: i64, iy: i64| -> f64 {
            let idx = (ix as u64).wrapping_mul(0x9E37_79B9).wrapping_add(iy as u64);
            keyed_uniform(seed, stream.wrapping_add(oct as u64) << 8, idx)
        };
        let v00 = lattice(x0 as i64, y0 as i64);
        let v01 = lattice(x0 as i64 + 1, y0 as i64);
        let v10 = lattice(x0 as i64, y0 as i64 + 1);
        let v11 = lattice(x0 as i64 + 1, y0 as i64 + 1);
        let v = v00 * (1.0 - tx) * (1.0 - ty)
            + v01 * tx * (1.0 - ty)
            + v10 * (1.0 - tx) * ty
            + v11 * tx * ty;
        total += v * amplitude;
        norm += amplitude;
        amplitude *= 0.5;
        cell /= 2.0;
    }
    total / norm
}

/// Per-class satellite base colors (desert sand, farm green, road gray,
/// building light) and the affine luminance->thermal maps.
const SAT_BASE: [[f64; 3]; N_CLASSES] = [
    [0.72, 0.62, 0.46],
    [0.25, 0.48, 0.22],
    [0.38, 0.38, 0.40],
    [0.78, 0.74, 0.70],
];
/// thermal = gain * luminance + offset per class, before contrast rescale.
const THERMAL_AFFINE: [(f64, f64); N_CLASSES] = [
    (0.25, 0.30),
    (0.9, -0.05),
    (0.6, 0.35),
    (0.8, 0.15),
];

/// Generate a co-registered (satellite, thermal) map pair from the spec.
pub fn generate_world(spec: &WorldSpec) -> Result<(RasterMap, RasterMap), SynthError> {
    spec.validate()?;
    let (h, w) = spec.size_px;
    let seed = spec.seed;

    // class thresholds: heightfield quantiles matching the mix fractions
    let mut height = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            height[y * w + x] =
                value_noise(seed, 1, x as f64, y as f64, 4, (w.min(h) as f64 / 4.0).max(4.0));
        }
    }
    let mut sorted = height.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("noise is finite"));
    let mut thresholds = [0.0f64; N_CLASSES - 1];
    let mut acc = 0.0;
    for (i, t) in thresholds.iter_mut().enumerate() {
        acc += spec.terrain_mix[i];
        let idx = ((acc * (h * w) as f64) as usize).min(h * w - 1);
        *t = sorted[idx];
    }
    let class_of = |v: f64| -> usize {
        thresholds.iter().position(|&t| v < t).unwrap_or(N_CLASSES - 1)
    };

    let mut sat = vec![0.0f64; 3 * h * w];
    let mut thermal = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let class = class_of(height[i]);
            // smooth per-pixel variation so tiles are distinguishable
            let tex = value_noise(seed, 2, x as f64, y as f64, 5, 24.0) - 0.5;
            let fine = keyed_uniform(seed, 3, i as u64) - 0.5;
            let mut lum = 0.0;
            for c in 0..3 {
                let v = (SAT_BASE[class][c] + 0.35 * tex + 0.04 * fine).clamp(0.0, 1.0);
                sat[c * h * w + i] = v;
                lum += v;
            }
            lum /= 3.0;
            let (gain, offset) = THERMAL_AFFINE[class];
            let t0 = (gain * lum + offset).clamp(0.0, 1.0);
            let mut t = 0.5 + spec.thermal_contrast * (t0 - 0.5);
            if spec.thermal_noise_std > 0.0 {
                t += spec.thermal_noise_std * keyed_normal(seed, 4, i as u64);
            }
            thermal[i] = t.clamp(0.0, 1.0);
        }
    }

    let sat_map = RasterMap::new(
        ImageBuf::new(3, h, w, sat).expect("satellite pixels in range"),
        spec.meters_per_pixel,
        (0.0, 0.0),
        None,
    )
    .expect("valid resolution");
    let thermal_map = RasterMap::new(
        ImageBuf::new(1, h, w, thermal).expect("thermal pixels in range"),
        spec.meters_per_pixel,
        (0.0, 0.0),
        None,
    )
    .expect("valid resolution");
    Ok((sat_map, thermal_map))
}
