//! Partial triplet mining: a per-epoch cache of database embeddings and
//! hardest positive/negative selection under the geometric gates.
//!
//! Positives must lie within the positive radius of the query (35 m at paper
//! settings), negatives strictly beyond the negative radius (50 m); the band
//! in between belongs to neither role. Within the geometrically valid sets,
//! selection is by smallest descriptor L2 distance, ties broken by ascending
//! tile id.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geodata::{geo_distance, GeoTile};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("database is empty")]
    EmptyDatabase,
    #[error("cache is empty")]
    EmptyCache,
    #[error("embedding failed: {0}")]
    Embed(String),
}

/// Anything that can embed tiles into fixed-dimension f32 descriptors.
pub trait CacheEmbedder {
    fn descriptor_dim(&self) -> usize;
    fn embed_tiles(&mut self, tiles: &[GeoTile]) -> Result<Vec<Vec<f32>>, MiningError>;
}

/// Per-epoch snapshot of sampled database tiles with their embeddings.
pub struct MiningCache {
    pub tiles: Vec<GeoTile>,
    pub descriptors: Vec<Vec<f32>>,
    pub epoch_stamp: u64,
}

impl MiningCache {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Triplet structure consumed by the embedding losses.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub query: GeoTile,
    pub positive: GeoTile,
    pub negatives: Vec<GeoTile>,
    /// Set when fewer valid negatives existed than requested.
    pub short_of_negatives: bool,
}

/// Outcome of mining one query against the cache.
pub enum MineOutcome {
    Mined(TripletBatch),
    /// No cached tile within the positive radius.
    SkipNoPositive,
}

/// Sample min(cache_size, |db|) tiles without replacement (seeded) and embed
/// them with the current model in eval mode.
pub fn refresh_cache<E: CacheEmbedder>(
    model: &mut E,
    db_tiles: &[GeoTile],
    cache_size: usize,
    seed: u64,
    epoch_stamp: u64,
) -> Result<MiningCache, MiningError> {
    if db_tiles.is_empty() {
        return Err(MiningError::EmptyDatabase);
    }
    let mut indices: Vec<usize> = (0..db_tiles.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(cache_size.min(db_tiles.len()));
    let tiles: Vec<GeoTile> = indices.iter().map(|&i| db_tiles[i].clone()).collect();
    let descriptors = model.embed_tiles(&tiles)?;
    Ok(MiningCache { tiles, descriptors, epoch_stamp })
}

fn desc_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Pick the hardest positive and the `n_neg` hardest negatives for a query.
pub fn mine_triplets(
    query_desc: &[f32],
    query_pos: (f64, f64),
    query_tile: &GeoTile,
    cache: &MiningCache,
    pos_radius_m: f64,
    neg_radius_m: f64,
    n_neg: usize,
) -> Result<MineOutcome, MiningError> {
    if cache.is_empty() {
        return Err(MiningError::EmptyCache);
    }

    let mut best_pos: Option<(f64, u64, usize)> = None;
    let mut negatives: Vec<(f64, u64, usize)> = Vec::new();
    for (i, tile) in cache.tiles.iter().enumerate() {
        let geo = geo_distance(query_pos, tile.position);
        if geo <= pos_radius_m {
            let d = desc_distance(query_desc, &cache.descriptors[i]);
            let cand = (d, tile.tile_id, i);
            let better = match &best_pos {
                None => true,
                Some(b) => (cand.0, cand.1) < (b.0, b.1),
            };
            if better {
                best_pos = Some(cand);
            }
        } else if geo > neg_radius_m {
            negatives.push((desc_distance(query_desc, &cache.descriptors[i]), tile.tile_id, i));
        }
    }

    let Some((_, _, pos_idx)) = best_pos else {
        return Ok(MineOutcome::SkipNoPositive);
    };
    negatives.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
    let short = negatives.len() < n_neg;
    if short {
        log::warn!(
            "query tile {} has only {} valid negatives ({} requested)",
            query_tile.tile_id,
            negatives.len(),
            n_neg
        );
    }
    negatives.truncate(n_neg);

    Ok(MineOutcome::Mined(TripletBatch {
        query: query_tile.clone(),
        positive: cache.tiles[pos_idx].clone(),
        negatives: negatives.into_iter().map(|(_, _, i)| cache.tiles[i].clone()).collect(),
        short_of_negatives: short,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagebuf::ImageBuf;
    use rand::Rng;

    fn tile_at(id: u64, x: f64, y: f64) -> GeoTile {
        GeoTile {
            image: ImageBuf::zeros(3, 2, 2),
            pixel_offset: (0, 0),
            position: (x, y),
            tile_id: id,
            invalid_fraction: 0.0,
        }
    }

    fn cache_of(entries: Vec<(GeoTile, Vec<f32>)>) -> MiningCache {
        let (tiles, descriptors) = entries.into_iter().unzip();
        MiningCache { tiles, descriptors, epoch_stamp: 0 }
    }

    struct FakeEmbedder {
        dim: usize,
    }

    impl CacheEmbedder for FakeEmbedder {
        fn descriptor_dim(&self) -> usize {
            self.dim
        }
        fn embed_tiles(&mut self, tiles: &[GeoTile]) -> Result<Vec<Vec<f32>>, MiningError> {
            Ok(tiles
                .iter()
                .map(|t| {
                    let mut v = vec![0.0f32; self.dim];
                    v[(t.tile_id as usize) % self.dim] = 1.0;
                    v
                })
                .collect())
        }
    }

    #[test]
    fn cache_holds_all_when_db_small() {
        let db: Vec<GeoTile> = (0..100).map(|i| tile_at(i, i as f64, 0.0)).collect();
        let mut m = FakeEmbedder { dim: 8 };
        let cache = refresh_cache(&mut m, &db, 5000, 42, 0).unwrap();
        assert_eq!(cache.len(), 100);
        let mut ids: Vec<u64> = cache.tiles.iter().map(|t| t.tile_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn cache_sampling_is_seeded() {
        let db: Vec<GeoTile> = (0..1000).map(|i| tile_at(i, i as f64, 0.0)).collect();
        let mut m = FakeEmbedder { dim: 8 };
        let a = refresh_cache(&mut m, &db, 64, 7, 0).unwrap();
        let b = refresh_cache(&mut m, &db, 64, 7, 0).unwrap();
        let ids = |c: &MiningCache| c.tiles.iter().map(|t| t.tile_id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let c = refresh_cache(&mut m, &db, 64, 8, 0).unwrap();
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn cache_samples_without_replacement() {
        let db: Vec<GeoTile> = (0..10_000).map(|i| tile_at(i, i as f64, 0.0)).collect();
        let mut m = FakeEmbedder { dim: 4 };
        let cache = refresh_cache(&mut m, &db, 5000, 3, 0).unwrap();
        assert_eq!(cache.len(), 5000);
        let mut ids: Vec<u64> = cache.tiles.iter().map(|t| t.tile_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 5000);
    }

    #[test]
    fn radius_gates_split_roles() {
        // tiles at 10 m, 40 m, 100 m: only the 10 m tile may be positive,
        // only the 100 m tile may be negative.
        let cache = cache_of(vec![
            (tile_at(0, 10.0, 0.0), vec![1.0, 0.0]),
            (tile_at(1, 40.0, 0.0), vec![0.9, 0.1]),
            (tile_at(2, 100.0, 0.0), vec![0.0, 1.0]),
        ]);
        let q = tile_at(99, 0.0, 0.0);
        let out = mine_triplets(&[1.0, 0.0], (0.0, 0.0), &q, &cache, 35.0, 50.0, 10).unwrap();
        match out {
            MineOutcome::Mined(batch) => {
                assert_eq!(batch.positive.tile_id, 0);
                assert_eq!(batch.negatives.len(), 1);
                assert_eq!(batch.negatives[0].tile_id, 2);
                assert!(batch.short_of_negatives);
            }
            _ => panic!("expected a mined batch"),
        }
    }

    #[test]
    fn positive_is_descriptor_argmin() {
        let cache = cache_of(vec![
            (tile_at(0, 10.0, 0.0), vec![0.6, 0.8]), // distance 0.4472... to q
            (tile_at(1, 20.0, 0.0), vec![0.98, 0.19899744]),
            (tile_at(2, 200.0, 0.0), vec![0.0, 1.0]),
        ]);
        let q = tile_at(99, 0.0, 0.0);
        let out = mine_triplets(&[1.0, 0.0], (0.0, 0.0), &q, &cache, 35.0, 50.0, 1).unwrap();
        match out {
            MineOutcome::Mined(batch) => assert_eq!(batch.positive.tile_id, 1),
            _ => panic!("expected a mined batch"),
        }
    }

    #[test]
    fn no_positive_in_radius_skips() {
        let cache = cache_of(vec![(tile_at(0, 500.0, 0.0), vec![1.0, 0.0])]);
        let q = tile_at(99, 0.0, 0.0);
        let out = mine_triplets(&[1.0, 0.0], (0.0, 0.0), &q, &cache, 35.0, 50.0, 1).unwrap();
        assert!(matches!(out, MineOutcome::SkipNoPositive));
    }

    #[test]
    fn matches_exhaustive_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let dim = 6;
            let n = 50;
            let entries: Vec<(GeoTile, Vec<f32>)> = (0..n)
                .map(|i| {
                    let t = tile_at(
                        i,
                        rng.gen_range(-120.0..120.0),
                        rng.gen_range(-120.0..120.0),
                    );
                    let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
                    v.iter_mut().for_each(|x| *x /= norm);
                    (t, v)
                })
                .collect();
            let cache = cache_of(entries.clone());
            let qdesc: Vec<f32> = {
                let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
                v.iter_mut().for_each(|x| *x /= norm);
                v
            };
            let qpos = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let q = tile_at(1000, qpos.0, qpos.1);
            let got = mine_triplets(&qdesc, qpos, &q, &cache, 35.0, 50.0, 5).unwrap();

            // oracle: exhaustive candidate scan with explicit sort
            let mut pos: Vec<(f64, u64)> = Vec::new();
            let mut neg: Vec<(f64, u64)> = Vec::new();
            for (t, d) in &entries {
                let geo = geo_distance(qpos, t.position);
                let dd = desc_distance(&qdesc, d);
                if geo <= 35.0 {
                    pos.push((dd, t.tile_id));
                } else if geo > 50.0 {
                    neg.push((dd, t.tile_id));
                }
            }
            pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
            neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
            match got {
                MineOutcome::SkipNoPositive => {
                    assert!(pos.is_empty(), "trial {trial}: skipped despite positives");
                }
                MineOutcome::Mined(batch) => {
                    assert_eq!(batch.positive.tile_id, pos[0].1, "trial {trial}");
                    let got_ids: Vec<u64> = batch.negatives.iter().map(|t| t.tile_id).collect();
                    let want_ids: Vec<u64> = neg.iter().take(5).map(|(_, id)| *id).collect();
                    assert_eq!(got_ids, want_ids, "trial {trial}");
                }
            }
        }
    }
}
