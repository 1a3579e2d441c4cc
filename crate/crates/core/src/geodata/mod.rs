//! Geo-referenced rasters, tiling, satellite/thermal pairing, and region
//! splits.
//!
//! Positions live in a local metric frame: meters from the map origin, x
//! along columns and y along rows. Retrieval radii (35 m positive, 50 m
//! negative, 512 m prior) are distances in this frame.

mod raster;
mod split;

pub use raster::{load_raster, save_raster, RasterManifest};
pub use split::{Rect, SplitSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagebuf::{ImageBuf, MaskBuf};

#[derive(Debug, Error)]
pub enum GeodataError {
    #[error("map {h}x{w} is smaller than crop size {crop}; no tile fits")]
    MapTooSmall { h: usize, w: usize, crop: usize },
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("pixel offset ({0}, {1}) present in only one tile list")]
    OffsetMismatch(usize, usize),
    #[error("invalid-fraction threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("{count} pair(s) fall in no split region; first tile_ids: {sample:?}")]
    Unassigned { count: usize, sample: Vec<u64> },
    #[error("validity mask is {mh}x{mw} but map is {h}x{w}")]
    MaskShape { mh: usize, mw: usize, h: usize, w: usize },
    #[error("meters_per_pixel must be > 0, got {0}")]
    BadResolution(f64),
    #[error("raster i/o: {0}")]
    Io(String),
}

/// A geo-referenced raster with metric resolution and origin.
#[derive(Clone, Debug)]
pub struct RasterMap {
    pub pixels: ImageBuf,
    pub meters_per_pixel: f64,
    /// Metric (x, y) of pixel (0, 0).
    pub origin: (f64, f64),
    pub validity_mask: Option<MaskBuf>,
}

impl RasterMap {
    pub fn new(
        pixels: ImageBuf,
        meters_per_pixel: f64,
        origin: (f64, f64),
        validity_mask: Option<MaskBuf>,
    ) -> Result<Self, GeodataError> {
        if meters_per_pixel <= 0.0 {
            return Err(GeodataError::BadResolution(meters_per_pixel));
        }
        if let Some(m) = &validity_mask {
            if m.height() != pixels.height() || m.width() != pixels.width() {
                return Err(GeodataError::MaskShape {
                    mh: m.height(),
                    mw: m.width(),
                    h: pixels.height(),
                    w: pixels.width(),
                });
            }
        }
        Ok(RasterMap { pixels, meters_per_pixel, origin, validity_mask })
    }

    pub fn channels(&self) -> usize {
        self.pixels.channels()
    }
}

/// One crop of a raster with its pixel offset and metric center position.
#[derive(Clone, Debug)]
pub struct GeoTile {
    pub image: ImageBuf,
    /// (row, col) of the crop's top-left corner in the source map.
    pub pixel_offset: (usize, usize),
    /// Metric (x, y) of the crop center.
    pub position: (f64, f64),
    pub tile_id: u64,
    /// Fraction of pixels flagged invalid by the source map's mask (0 when
    /// the map has no mask).
    pub invalid_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropSource {
    Real,
    Generated,
}

/// An aligned satellite/thermal tile pair.
#[derive(Clone, Debug)]
pub struct PairedCrop {
    pub satellite: GeoTile,
    pub thermal: GeoTile,
    pub source: CropSource,
    pub invalid_fraction: f64,
}

/// Region-based train/val/test partition of paired crops.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<PairedCrop>,
    pub val: Vec<PairedCrop>,
    pub test: Vec<PairedCrop>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Euclidean distance in the metric frame.
pub fn geo_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

/// Number of tile placements along one axis.
pub fn tiles_per_axis(dim: usize, crop: usize, stride: usize) -> usize {
    (dim - crop) / stride + 1
}

/// Tile a map into crop_size x crop_size tiles at the given stride.
///
/// Offsets enumerate (i*stride, j*stride) for every fully contained crop;
/// tile ids are consecutive in row-major order.
pub fn tile_map(
    map: &RasterMap,
    crop_size: usize,
    stride: usize,
) -> Result<Vec<GeoTile>, GeodataError> {
    if stride == 0 {
        return Err(GeodataError::ZeroStride);
    }
    let h = map.pixels.height();
    let w = map.pixels.width();
    if crop_size > h || crop_size > w {
        return Err(GeodataError::MapTooSmall { h, w, crop: crop_size });
    }
    let rows = tiles_per_axis(h, crop_size, stride);
    let cols = tiles_per_axis(w, crop_size, stride);
    let half = crop_size as f64 / 2.0;
    let mut tiles = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let row = i * stride;
            let col = j * stride;
            let position = (
                map.origin.0 + map.meters_per_pixel * (col as f64 + half),
                map.origin.1 + map.meters_per_pixel * (row as f64 + half),
            );
            let invalid_fraction = map
                .validity_mask
                .as_ref()
                .map(|m| m.invalid_fraction(row, col, crop_size))
                .unwrap_or(0.0);
            tiles.push(GeoTile {
                image: map.pixels.crop(row, col, crop_size),
                pixel_offset: (row, col),
                position,
                tile_id: (i * cols + j) as u64,
                invalid_fraction,
            });
        }
    }
    Ok(tiles)
}

/// Match satellite and thermal tiles by identical pixel offset.
///
/// The pair's invalid fraction comes from the thermal side's mask-derived
/// fraction (0 when the thermal map had no mask).
pub fn pair_crops(
    sat_tiles: &[GeoTile],
    thermal_tiles: &[GeoTile],
) -> Result<Vec<PairedCrop>, GeodataError> {
    use std::collections::HashMap;
    let by_offset: HashMap<(usize, usize), &GeoTile> =
        thermal_tiles.iter().map(|t| (t.pixel_offset, t)).collect();
    if sat_tiles.len() != thermal_tiles.len() {
        // find the first offset present on one side only for the message
        let sat_offsets: std::collections::HashSet<_> =
            sat_tiles.iter().map(|t| t.pixel_offset).collect();
        for t in thermal_tiles {
            if !sat_offsets.contains(&t.pixel_offset) {
                return Err(GeodataError::OffsetMismatch(t.pixel_offset.0, t.pixel_offset.1));
            }
        }
        for t in sat_tiles {
            if !by_offset.contains_key(&t.pixel_offset) {
                return Err(GeodataError::OffsetMismatch(t.pixel_offset.0, t.pixel_offset.1));
            }
        }
    }
    let mut pairs = Vec::with_capacity(sat_tiles.len());
    for sat in sat_tiles {
        let thermal = by_offset
            .get(&sat.pixel_offset)
            .ok_or(GeodataError::OffsetMismatch(sat.pixel_offset.0, sat.pixel_offset.1))?;
        pairs.push(PairedCrop {
            satellite: sat.clone(),
            thermal: (*thermal).clone(),
            source: CropSource::Real,
            invalid_fraction: thermal.invalid_fraction,
        });
    }
    Ok(pairs)
}

/// Keep pairs whose invalid fraction is at or below the threshold,
/// preserving input order. Intended for generator training; embedding
/// training keeps all pairs.
pub fn filter_invalid(
    pairs: &[PairedCrop],
    max_invalid_fraction: f64,
) -> Result<Vec<PairedCrop>, GeodataError> {
    if !(0.0..=1.0).contains(&max_invalid_fraction) {
        return Err(GeodataError::BadThreshold(max_invalid_fraction));
    }
    Ok(pairs
        .iter()
        .filter(|p| p.invalid_fraction <= max_invalid_fraction)
        .cloned()
        .collect())
}

/// Assign each pair to train/val/test by its center position.
///
/// Regions are checked in split order (train, val, test) and first match
/// wins, so overlapping rectangles still produce a partition. A pair whose
/// center falls in no region is an error.
pub fn split_by_region(
    pairs: &[PairedCrop],
    spec: &SplitSpec,
) -> Result<DatasetSplit, GeodataError> {
    let mut out = DatasetSplit::default();
    let mut unassigned = Vec::new();
    for p in pairs {
        let pos = p.satellite.position;
        if spec.train.iter().any(|r| r.contains(pos)) {
            out.train.push(p.clone());
        } else if spec.val.iter().any(|r| r.contains(pos)) {
            out.val.push(p.clone());
        } else if spec.test.iter().any(|r| r.contains(pos)) {
            out.test.push(p.clone());
        } else {
            unassigned.push(p.satellite.tile_id);
        }
    }
    if !unassigned.is_empty() {
        let sample = unassigned.iter().take(8).copied().collect();
        return Err(GeodataError::Unassigned { count: unassigned.len(), sample });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray_map(h: usize, w: usize, mpp: f64) -> RasterMap {
        let img = ImageBuf::from_fn(1, h, w, |_, y, x| ((y * w + x) % 256) as f64 / 255.0);
        RasterMap::new(img, mpp, (0.0, 0.0), None).unwrap()
    }

    #[test]
    fn tiling_582_512_35_gives_nine() {
        let tiles = tile_map(&gray_map(582, 582, 1.0), 512, 35).unwrap();
        assert_eq!(tiles.len(), 9);
        assert_eq!(tiles[0].pixel_offset, (0, 0));
        assert_eq!(tiles[8].pixel_offset, (70, 70));
        // consecutive row-major ids
        for (i, t) in tiles.iter().enumerate() {
            assert_eq!(t.tile_id, i as u64);
        }
    }

    #[test]
    fn tiling_exact_fit_single_tile() {
        let tiles = tile_map(&gray_map(512, 512, 1.0), 512, 35).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].pixel_offset, (0, 0));
    }

    #[test]
    fn tiling_1024_matches_brute_force_enumeration() {
        let map = gray_map(1024, 1024, 2.0);
        let tiles = tile_map(&map, 512, 35).unwrap();
        // oracle: enumerate placements directly
        let mut expected = Vec::new();
        let mut r = 0;
        while r + 512 <= 1024 {
            let mut c = 0;
            while c + 512 <= 1024 {
                expected.push((r, c));
                c += 35;
            }
            r += 35;
        }
        assert_eq!(tiles.len(), expected.len());
        assert_eq!(tiles.len(), 225);
        for (t, e) in tiles.iter().zip(&expected) {
            assert_eq!(t.pixel_offset, *e);
        }
        // tile 0 center = origin + 256 * mpp per axis
        assert_eq!(tiles[0].position, (2.0 * 256.0, 2.0 * 256.0));
    }

    #[test]
    fn tiling_small_map_errors() {
        let err = tile_map(&gray_map(100, 100, 1.0), 512, 35).unwrap_err();
        assert!(matches!(err, GeodataError::MapTooSmall { .. }));
        assert!(err.to_string().contains("no tile fits"));
    }

    #[test]
    fn tile_count_formula_holds_over_random_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let crop = rng.gen_range(4..40);
            let h = crop + rng.gen_range(0..100);
            let w = crop + rng.gen_range(0..100);
            let stride = rng.gen_range(1..20);
            let tiles = tile_map(&gray_map(h, w, 1.0), crop, stride).unwrap();
            let want = ((h - crop) / stride + 1) * ((w - crop) / stride + 1);
            assert_eq!(tiles.len(), want, "h={h} w={w} crop={crop} stride={stride}");
        }
    }

    #[test]
    fn pairing_aligns_positions_exactly() {
        let sat = {
            let img = ImageBuf::from_fn(3, 582, 582, |c, y, x| ((c + y + x) % 7) as f64 / 7.0);
            RasterMap::new(img, 1.0, (10.0, -5.0), None).unwrap()
        };
        let thermal = {
            let img = ImageBuf::from_fn(1, 582, 582, |_, y, x| ((y * x) % 11) as f64 / 11.0);
            RasterMap::new(img, 1.0, (10.0, -5.0), None).unwrap()
        };
        let st = tile_map(&sat, 512, 35).unwrap();
        let tt = tile_map(&thermal, 512, 35).unwrap();
        let pairs = pair_crops(&st, &tt).unwrap();
        assert_eq!(pairs.len(), 9);
        for p in &pairs {
            assert_eq!(p.satellite.position, p.thermal.position);
            assert_eq!(p.invalid_fraction, 0.0);
        }
    }

    #[test]
    fn pairing_mask_half_invalid() {
        let img = ImageBuf::from_fn(1, 512, 512, |_, _, _| 0.5);
        // invalid (false) on the upper 256 rows
        let mask: Vec<bool> = (0..512 * 512).map(|i| i / 512 >= 256).collect();
        let map = RasterMap::new(img.clone(), 1.0, (0.0, 0.0), Some(MaskBuf::new(512, 512, mask)))
            .unwrap();
        let sat = RasterMap::new(
            ImageBuf::from_fn(3, 512, 512, |_, _, _| 0.1),
            1.0,
            (0.0, 0.0),
            None,
        )
        .unwrap();
        let pairs = pair_crops(
            &tile_map(&sat, 512, 35).unwrap(),
            &tile_map(&map, 512, 35).unwrap(),
        )
        .unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].invalid_fraction, 0.5);
    }

    #[test]
    fn pairing_disjoint_offsets_errors() {
        let sat = gray_map(582, 582, 1.0);
        let thermal = gray_map(582, 582, 1.0);
        let st = tile_map(&sat, 512, 35).unwrap();
        let mut tt = tile_map(&thermal, 512, 70).unwrap(); // offsets 0,70 only
        tt.retain(|t| t.pixel_offset != (0, 0));
        let err = pair_crops(&st, &tt).unwrap_err();
        assert!(matches!(err, GeodataError::OffsetMismatch(..)));
    }

    fn pair_with_fraction(id: u64, frac: f64) -> PairedCrop {
        let img = ImageBuf::zeros(1, 2, 2);
        let tile = |c| GeoTile {
            image: ImageBuf::zeros(c, 2, 2),
            pixel_offset: (id as usize, 0),
            position: (id as f64 * 10.0, 0.0),
            tile_id: id,
            invalid_fraction: frac,
        };
        let _ = img;
        PairedCrop {
            satellite: tile(3),
            thermal: tile(1),
            source: CropSource::Real,
            invalid_fraction: frac,
        }
    }

    #[test]
    fn filter_threshold_zero_keeps_clean_only() {
        let pairs: Vec<_> = [0.0, 0.5, 0.01]
            .iter()
            .enumerate()
            .map(|(i, &f)| pair_with_fraction(i as u64, f))
            .collect();
        let kept = filter_invalid(&pairs, 0.0).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].satellite.tile_id, 0);
    }

    #[test]
    fn filter_threshold_one_is_identity() {
        let pairs: Vec<_> = [0.0, 0.3, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &f)| pair_with_fraction(i as u64, f))
            .collect();
        let kept = filter_invalid(&pairs, 1.0).unwrap();
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn filter_threshold_point_one() {
        let pairs: Vec<_> = [0.0, 0.05, 0.2, 0.11]
            .iter()
            .enumerate()
            .map(|(i, &f)| pair_with_fraction(i as u64, f))
            .collect();
        let kept = filter_invalid(&pairs, 0.1).unwrap();
        let ids: Vec<u64> = kept.iter().map(|p| p.satellite.tile_id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn filter_bad_threshold_errors() {
        assert!(filter_invalid(&[], 1.5).is_err());
        assert!(filter_invalid(&[], -0.1).is_err());
    }

    #[test]
    fn split_partitions_against_brute_force() {
        // 225 tiles from a 1024 map; left half train, right half test
        let map = gray_map(1024, 1024, 1.0);
        let sat = RasterMap::new(
            ImageBuf::from_fn(3, 1024, 1024, |_, _, _| 0.2),
            1.0,
            (0.0, 0.0),
            None,
        )
        .unwrap();
        let pairs = pair_crops(
            &tile_map(&sat, 512, 35).unwrap(),
            &tile_map(&map, 512, 35).unwrap(),
        )
        .unwrap();
        assert_eq!(pairs.len(), 225);
        let boundary = 256.0 + 35.0 * 7.0 + 1.0; // between tile columns 7 and 8
        let spec = SplitSpec {
            train: vec![Rect::new(-1e9, -1e9, boundary, 1e9)],
            val: vec![],
            test: vec![Rect::new(boundary, -1e9, 1e9, 1e9)],
        };
        let split = split_by_region(&pairs, &spec).unwrap();
        let (tr, va, te) = split.counts();
        assert_eq!(tr + va + te, 225);
        assert_eq!(va, 0);
        // oracle: point-in-region check per pair
        let mut want_train = 0;
        for p in &pairs {
            if p.satellite.position.0 < boundary {
                want_train += 1;
            }
        }
        assert_eq!(tr, want_train);
        // disjoint ids
        let mut ids: Vec<u64> = split
            .train
            .iter()
            .chain(&split.test)
            .map(|p| p.satellite.tile_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 225);
    }

    #[test]
    fn split_single_region_takes_all() {
        let pairs: Vec<_> = (0..5).map(|i| pair_with_fraction(i, 0.0)).collect();
        let spec = SplitSpec {
            train: vec![Rect::new(-1e9, -1e9, 1e9, 1e9)],
            val: vec![],
            test: vec![],
        };
        let split = split_by_region(&pairs, &spec).unwrap();
        assert_eq!(split.counts(), (5, 0, 0));
    }

    #[test]
    fn split_unassigned_errors_with_ids() {
        let pairs: Vec<_> = (0..3).map(|i| pair_with_fraction(i, 0.0)).collect();
        let spec = SplitSpec {
            train: vec![Rect::new(-1.0, -1.0, 5.0, 5.0)], // only tile 0 at x=0
            val: vec![],
            test: vec![],
        };
        let err = split_by_region(&pairs, &spec).unwrap_err();
        match err {
            GeodataError::Unassigned { count, sample } => {
                assert_eq!(count, 2);
                assert_eq!(sample, vec![1, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
