//! Planar image buffers shared across the pipeline.
//!
//! Pixels are stored channel-planar (c, y, x), normalized to [0, 1], in f64.
//! Buffers are reference-counted so tiles, pairs, and batches clone cheaply.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel data length {got} does not match {c}x{h}x{w}")]
    LengthMismatch { got: usize, c: usize, h: usize, w: usize },
    #[error("non-finite pixel at index {0}")]
    NonFinite(usize),
    #[error("expected {expected} channels, image has {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

/// A planar (c, h, w) image with values in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageBuf {
    h: usize,
    w: usize,
    c: usize,
    data: Arc<Vec<f64>>,
}

impl ImageBuf {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != c * h * w {
            return Err(ImageError::LengthMismatch { got: data.len(), c, h, w });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(ImageBuf { h, w, c, data: Arc::new(data) })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        ImageBuf { h, w, c, data: Arc::new(vec![0.0; c * h * w]) }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Crop a (size x size) window with its top-left corner at (row, col).
    pub fn crop(&self, row: usize, col: usize, size: usize) -> ImageBuf {
        assert!(row + size <= self.h && col + size <= self.w, "crop out of bounds");
        let mut out = Vec::with_capacity(self.c * size * size);
        for c in 0..self.c {
            for y in 0..size {
                let start = (c * self.h + row + y) * self.w + col;
                out.extend_from_slice(&self.data[start..start + size]);
            }
        }
        ImageBuf { h: size, w: size, c: self.c, data: Arc::new(out) }
    }

    /// Bilinear resize to (new_h, new_w). Identity dimensions return a clone.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> ImageBuf {
        if new_h == self.h && new_w == self.w {
            return self.clone();
        }
        let mut out = vec![0.0f64; self.c * new_h * new_w];
        let sy = self.h as f64 / new_h as f64;
        let sx = self.w as f64 / new_w as f64;
        for c in 0..self.c {
            for oy in 0..new_h {
                // align pixel centers
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.h - 1);
                let wy = fy - y0 as f64;
                for ox in 0..new_w {
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.w - 1);
                    let wx = fx - x0 as f64;
                    let p00 = self.get(c, y0, x0) as f64;
                    let p01 = self.get(c, y0, x1) as f64;
                    let p10 = self.get(c, y1, x0) as f64;
                    let p11 = self.get(c, y1, x1) as f64;
                    let v = p00 * (1.0 - wy) * (1.0 - wx)
                        + p01 * (1.0 - wy) * wx
                        + p10 * wy * (1.0 - wx)
                        + p11 * wy * wx;
                    out[(c * new_h + oy) * new_w + ox] = v;
                }
            }
        }
        ImageBuf { h: new_h, w: new_w, c: self.c, data: Arc::new(out) }
    }

    /// Replicate a single channel to `n` channels (thermal -> backbone input).
    pub fn replicate_channels(&self, n: usize) -> ImageBuf {
        assert_eq!(self.c, 1, "replicate_channels expects a 1-channel image");
        let mut out = Vec::with_capacity(n * self.h * self.w);
        for _ in 0..n {
            out.extend_from_slice(&self.data);
        }
        ImageBuf { h: self.h, w: self.w, c: n, data: Arc::new(out) }
    }

    /// Build from a closure over (c, y, x).
    pub fn from_fn(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        ImageBuf { h, w, c, data: Arc::new(data) }
    }

    /// Map every pixel through `f`, producing a new buffer.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuf {
        ImageBuf {
            h: self.h,
            w: self.w,
            c: self.c,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn ensure_channels(&self, expected: usize) -> Result<(), ImageError> {
        if self.c != expected {
            return Err(ImageError::ChannelMismatch { expected, got: self.c });
        }
        Ok(())
    }
}

/// Boolean mask with image dimensions; `true` marks a valid pixel.
#[derive(Clone, Debug)]
pub struct MaskBuf {
    h: usize,
    w: usize,
    data: Arc<Vec<bool>>,
}

impl MaskBuf {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), h * w, "mask length mismatch");
        MaskBuf { h, w, data: Arc::new(data) }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    /// Fraction of invalid pixels inside a square window.
    pub fn invalid_fraction(&self, row: usize, col: usize, size: usize) -> f64 {
        let mut invalid = 0usize;
        for y in row..row + size {
            for x in col..col + size {
                if !self.get(y, x) {
                    invalid += 1;
                }
            }
        }
        invalid as f64 / (size * size) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_extracts_planar_window() {
        let img = ImageBuf::from_fn(2, 4, 4, |c, y, x| (c * 100 + y * 10 + x) as f64 / 255.0);
        let crop = img.crop(1, 2, 2);
        assert_eq!(crop.height(), 2);
        assert_eq!(crop.get(0, 0, 0), 12.0 / 255.0);
        assert_eq!(crop.get(1, 1, 1), 123.0 / 255.0);
    }

    #[test]
    fn resize_identity_is_clone() {
        let img = ImageBuf::from_fn(1, 3, 3, |_, y, x| (y * 3 + x) as f64 / 10.0);
        let same = img.resize_bilinear(3, 3);
        assert_eq!(img.data(), same.data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImageBuf::from_fn(3, 8, 8, |_, _, _| 0.37);
        let up = img.resize_bilinear(16, 16);
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        let down = up.resize_bilinear(4, 4);
        assert!(down.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn invalid_fraction_counts_false_pixels() {
        let mut mask = vec![true; 16];
        for i in 0..8 {
            mask[i] = false;
        }
        let m = MaskBuf::new(4, 4, mask);
        assert_eq!(m.invalid_fraction(0, 0, 4), 0.5);
        assert_eq!(m.invalid_fraction(2, 0, 2), 0.0);
    }
}
