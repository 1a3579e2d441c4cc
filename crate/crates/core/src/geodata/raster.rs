//! Raster i/o: PNG pixels plus a plain-text key-value manifest sidecar.
//!
//! The sidecar lives at `<raster>.meta` and carries `meters_per_pixel`,
//! `origin_x`, `origin_y`, and optionally `mask` (path to a PNG whose
//! nonzero pixels mark valid map area).

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::{GeodataError, RasterMap};
use crate::imagebuf::{ImageBuf, MaskBuf};

/// Parsed sidecar contents.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterManifest {
    pub meters_per_pixel: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub mask: Option<PathBuf>,
}

impl RasterManifest {
    pub fn parse(text: &str) -> Result<Self, GeodataError> {
        let mut mpp = None;
        let mut ox = None;
        let mut oy = None;
        let mut mask = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| GeodataError::Io(format!("manifest line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| GeodataError::Io(format!("manifest key {key}: bad number {v:?}")))
            };
            match key {
                "meters_per_pixel" => mpp = Some(parse_f64(value)?),
                "origin_x" => ox = Some(parse_f64(value)?),
                "origin_y" => oy = Some(parse_f64(value)?),
                "mask" => mask = Some(PathBuf::from(value)),
                other => {
                    return Err(GeodataError::Io(format!("manifest: unknown key {other:?}")));
                }
            }
        }
        Ok(RasterManifest {
            meters_per_pixel: mpp
                .ok_or_else(|| GeodataError::Io("manifest: missing meters_per_pixel".into()))?,
            origin_x: ox.unwrap_or(0.0),
            origin_y: oy.unwrap_or(0.0),
            mask,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "meters_per_pixel = {}\norigin_x = {}\norigin_y = {}\n",
            self.meters_per_pixel, self.origin_x, self.origin_y
        );
        if let Some(m) = &self.mask {
            s.push_str(&format!("mask = {}\n", m.display()));
        }
        s
    }
}

fn manifest_path(raster: &Path) -> PathBuf {
    let mut os = raster.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

fn decode_pixels(img: DynamicImage) -> ImageBuf {
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            ImageBuf::from_fn(1, h, w, |_, y, x| g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
        }
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            ImageBuf::from_fn(1, h, w, |_, y, x| {
                g.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            })
        }
        DynamicImage::ImageRgb16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            ImageBuf::from_fn(3, h, w, |c, y, x| {
                g.get_pixel(x as u32, y as u32).0[c] as f64 / 65535.0
            })
        }
        other => {
            let g = other.to_rgb8();
            let (w, h) = (g.width() as usize, g.height() as usize);
            ImageBuf::from_fn(3, h, w, |c, y, x| {
                g.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            })
        }
    }
}

/// Load a raster and its `<path>.meta` sidecar. A relative mask path in the
/// manifest resolves against the raster's directory.
pub fn load_raster(path: &Path) -> Result<RasterMap, GeodataError> {
    let manifest_text = std::fs::read_to_string(manifest_path(path))
        .map_err(|e| GeodataError::Io(format!("reading {}: {e}", manifest_path(path).display())))?;
    let manifest = RasterManifest::parse(&manifest_text)?;
    let img = image::open(path).map_err(|e| GeodataError::Io(format!("{}: {e}", path.display())))?;
    let pixels = decode_pixels(img);

    let mask = match &manifest.mask {
        Some(mpath) => {
            let resolved = if mpath.is_absolute() {
                mpath.clone()
            } else {
                path.parent().unwrap_or(Path::new(".")).join(mpath)
            };
            let mimg = image::open(&resolved)
                .map_err(|e| GeodataError::Io(format!("{}: {e}", resolved.display())))?
                .to_luma8();
            let (w, h) = (mimg.width() as usize, mimg.height() as usize);
            let data = (0..h * w)
                .map(|i| mimg.get_pixel((i % w) as u32, (i / w) as u32).0[0] != 0)
                .collect();
            Some(MaskBuf::new(h, w, data))
        }
        None => None,
    };

    RasterMap::new(
        pixels,
        manifest.meters_per_pixel,
        (manifest.origin_x, manifest.origin_y),
        mask,
    )
}

/// Write a raster as 16-bit PNG plus its manifest sidecar. The optional mask
/// is written next to the raster as `<stem>_mask.png`.
pub fn save_raster(map: &RasterMap, path: &Path) -> Result<(), GeodataError> {
    let h = map.pixels.height() as u32;
    let w = map.pixels.width() as u32;
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let io_err = |e: image::ImageError| GeodataError::Io(format!("{}: {e}", path.display()));

    match map.pixels.channels() {
        1 => {
            let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
                Luma([quant(map.pixels.get(0, y as usize, x as usize))])
            });
            img.save(path).map_err(io_err)?;
        }
        3 => {
            let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
                Rgb([
                    quant(map.pixels.get(0, y as usize, x as usize)),
                    quant(map.pixels.get(1, y as usize, x as usize)),
                    quant(map.pixels.get(2, y as usize, x as usize)),
                ])
            });
            img.save(path).map_err(io_err)?;
        }
        c => return Err(GeodataError::Io(format!("unsupported channel count {c}"))),
    }

    let mut mask_rel = None;
    if let Some(mask) = &map.validity_mask {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("raster");
        let mask_name = format!("{stem}_mask.png");
        let mask_path = path.with_file_name(&mask_name);
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
                Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
            });
        img.save(&mask_path)
            .map_err(|e| GeodataError::Io(format!("{}: {e}", mask_path.display())))?;
        mask_rel = Some(PathBuf::from(mask_name));
    }

    let manifest = RasterManifest {
        meters_per_pixel: map.meters_per_pixel,
        origin_x: map.origin.0,
        origin_y: map.origin.1,
        mask: mask_rel,
    };
    std::fs::write(manifest_path(path), manifest.render())
        .map_err(|e| GeodataError::Io(format!("writing manifest: {e}")))?;
    Ok(())
}
