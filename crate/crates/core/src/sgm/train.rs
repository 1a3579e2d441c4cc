//! Embedding training over real plus generated pairs, and index building.
//!
//! Per epoch the mining cache is refreshed from the satellite database with
//! the current weights, then queries stream through in small batches. Each
//! query contributes `negatives_per_query` triplets sharing its (query,
//! positive) pair. The DANN branch updates in the same step through the
//! gradient reversal; there is no separate adversarial alternation.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{EmbeddingModel, SATELLITE_CLASS, THERMAL_CLASS};
use super::{DannMode, SgmConfig, SgmError};
use crate::evalkit::{self, EvalQuery};
use crate::geodata::{GeoTile, PairedCrop};
use crate::imagebuf::ImageBuf;
use crate::mining::{self, MineOutcome, MiningCache, TripletBatch};
use crate::nn::{Adam, Graph, Tensor};
use crate::retrieval::DescriptorIndex;

pub struct SgmTrainStats {
    /// Total loss per optimization step.
    pub loss_history: Vec<f64>,
    /// Queries skipped because no positive was cached within the radius.
    pub skipped_queries: usize,
    /// Validation R_512@1 per epoch (empty when no validation split).
    pub val_recalls: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// One descriptor per tile in input order; the index records the model
/// fingerprint so evaluation can refuse mismatched artifacts.
pub fn build_index(
    model: &mut EmbeddingModel,
    tiles: &[GeoTile],
) -> Result<DescriptorIndex, SgmError> {
    if tiles.is_empty() {
        return Err(SgmError::EmptyDataset);
    }
    let images: Vec<&ImageBuf> = tiles.iter().map(|t| &t.image).collect();
    let descs = model.embed_images(&images)?;
    let rows: Vec<Vec<f32>> = descs
        .into_iter()
        .map(|r| r.into_iter().map(|v| v as f32).collect())
        .collect();
    let positions: Vec<(f64, f64)> = tiles.iter().map(|t| t.position).collect();
    let ids: Vec<u64> = tiles.iter().map(|t| t.tile_id).collect();
    Ok(DescriptorIndex::new(
        model.descriptor_dim(),
        rows,
        positions,
        ids,
        &model.fingerprint(),
    )?)
}

struct QueryPool {
    queries: Vec<PairedCrop>,
    db_tiles: Vec<GeoTile>,
    cache: Option<MiningCache>,
}

impl QueryPool {
    fn from_pairs(pairs: &[PairedCrop]) -> Self {
        QueryPool {
            queries: pairs.to_vec(),
            db_tiles: pairs.iter().map(|p| p.satellite.clone()).collect(),
            cache: None,
        }
    }
}

/// Train the embedding model. Thermal sides of `train_pairs`, `generated`,
/// and `val_pairs` must already be in the experiment's enhancement domain.
pub fn train_sgm(
    config: &SgmConfig,
    train_pairs: &[PairedCrop],
    generated: &[PairedCrop],
    val_pairs: &[PairedCrop],
    checkpoint_dir: Option<&Path>,
) -> Result<(EmbeddingModel, SgmTrainStats), SgmError> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(SgmError::EmptyDataset);
    }
    if config.use_generated && generated.is_empty() {
        return Err(SgmError::EmptyGenerated);
    }

    let mut model = EmbeddingModel::new(config)?;
    let mut real_pool = QueryPool::from_pairs(train_pairs);
    let mut gen_pool = config.use_generated.then(|| QueryPool::from_pairs(generated));
    if config.kmeans_init {
        model.kmeans_init_centers(&real_pool.db_tiles, config.seed.wrapping_add(11))?;
    }
    let data_fp = crate::checkpoint::dataset_fingerprint(train_pairs);

    let mut adam = Adam::new(&model.store, config.learning_rate, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut stats = SgmTrainStats {
        loss_history: Vec::new(),
        skipped_queries: 0,
        val_recalls: Vec::new(),
        best_epoch: None,
    };
    let mut best_snapshot: Option<(f64, Vec<Tensor>)> = None;
    let mut step_counter = 0usize;

    for epoch in 0..config.epochs {
        let cache_seed = config.seed.wrapping_add(1000).wrapping_add(epoch as u64);
        real_pool.cache = Some(mining::refresh_cache(
            &mut model,
            &real_pool.db_tiles,
            config.cache_size,
            cache_seed,
            epoch as u64,
        )?);
        if let Some(pool) = gen_pool.as_mut() {
            pool.cache = Some(mining::refresh_cache(
                &mut model,
                &pool.db_tiles,
                config.cache_size,
                cache_seed.wrapping_add(1),
                epoch as u64,
            )?);
        }

        let mut pending: Vec<TripletBatch> = Vec::with_capacity(config.batch_queries);
        for _ in 0..config.queries_per_epoch {
            let use_gen = gen_pool.is_some() && rng.gen_bool(config.generated_mix_ratio);
            let pool = if use_gen {
                gen_pool.as_ref().expect("checked above")
            } else {
                &real_pool
            };
            let qi = rng.gen_range(0..pool.queries.len());
            let pair = pool.queries[qi].clone();
            let q_tile = pair.thermal.clone();
            let q_desc_f64 = model.embed_image(&q_tile.image)?;
            let q_desc: Vec<f32> = q_desc_f64.iter().map(|&v| v as f32).collect();
            let cache = if use_gen {
                gen_pool.as_ref().expect("checked above").cache.as_ref()
            } else {
                real_pool.cache.as_ref()
            }
            .expect("cache refreshed at epoch start");
            match mining::mine_triplets(
                &q_desc,
                q_tile.position,
                &q_tile,
                cache,
                config.pos_radius_m,
                config.neg_radius_m,
                config.negatives_per_query,
            )? {
                MineOutcome::SkipNoPositive => {
                    stats.skipped_queries += 1;
                }
                MineOutcome::Mined(batch) => {
                    if batch.negatives.is_empty() {
                        stats.skipped_queries += 1;
                    } else {
                        pending.push(batch);
                    }
                }
            }
            if pending.len() == config.batch_queries {
                let loss = train_step(&mut model, &mut adam, config, &pending)?;
                step_counter += 1;
                if !loss.is_finite() {
                    return Err(SgmError::DivergedLoss { step: step_counter, epoch });
                }
                stats.loss_history.push(loss);
                pending.clear();
            }
        }
        if !pending.is_empty() {
            let loss = train_step(&mut model, &mut adam, config, &pending)?;
            step_counter += 1;
            if !loss.is_finite() {
                return Err(SgmError::DivergedLoss { step: step_counter, epoch });
            }
            stats.loss_history.push(loss);
            pending.clear();
        }

        if !val_pairs.is_empty() {
            let recall = validation_recall(&mut model, val_pairs)?;
            stats.val_recalls.push(recall);
            let improved = best_snapshot.as_ref().map(|(r, _)| recall > *r).unwrap_or(true);
            if improved {
                best_snapshot = Some((
                    recall,
                    model.store.entries().iter().map(|e| e.value.clone()).collect(),
                ));
                stats.best_epoch = Some(epoch);
            }
            log::info!(
                "sgm epoch {epoch}: loss {:.4}, val R_512@1 {recall:.1}",
                stats.loss_history.last().copied().unwrap_or(f64::NAN)
            );
        } else {
            log::info!(
                "sgm epoch {epoch}: loss {:.4}, skipped {}",
                stats.loss_history.last().copied().unwrap_or(f64::NAN),
                stats.skipped_queries
            );
        }

        if let Some(dir) = checkpoint_dir {
            model.save(&dir.join("sgm.ckpt"), &data_fp)?;
        }
    }

    // restore the best-validation weights when a validation split exists
    if let Some((_, snapshot)) = best_snapshot {
        for (slot, value) in model.store.entries_mut().iter_mut().zip(snapshot) {
            slot.value = value;
        }
        if let Some(dir) = checkpoint_dir {
            model.save(&dir.join("sgm.ckpt"), &data_fp)?;
        }
    }
    if let Some(dir) = checkpoint_dir {
        model.save(&dir.join("sgm.ckpt"), &data_fp)?;
    }

    Ok((model, stats))
}

/// Validation metric for checkpoint selection: R_512@1 with the validation
/// satellite tiles as the database.
fn validation_recall(
    model: &mut EmbeddingModel,
    val_pairs: &[PairedCrop],
) -> Result<f64, SgmError> {
    let tiles: Vec<GeoTile> = val_pairs.iter().map(|p| p.satellite.clone()).collect();
    let index = build_index(model, &tiles)?;
    let images: Vec<&ImageBuf> = val_pairs.iter().map(|p| &p.thermal.image).collect();
    let descs = model.embed_images(&images)?;
    let queries: Vec<EvalQuery> = descs
        .into_iter()
        .zip(val_pairs)
        .map(|(descriptor, p)| EvalQuery { descriptor, truth: p.thermal.position })
        .collect();
    let (recall, _) = evalkit::recall_prior(&index, &queries, 1, evalkit::DEFAULT_PRIOR_RADIUS_M)
        .map_err(|e| SgmError::BadConfig(format!("validation metric failed: {e}")))?;
    Ok(recall)
}

/// One optimization step over a group of mined triplet batches.
fn train_step(
    model: &mut EmbeddingModel,
    adam: &mut Adam,
    config: &SgmConfig,
    batches: &[TripletBatch],
) -> Result<f64, SgmError> {
    // layout: per batch [query, positive, negatives...]
    let mut images: Vec<ImageBuf> = Vec::new();
    let mut offsets = Vec::with_capacity(batches.len());
    for b in batches {
        offsets.push(images.len());
        images.push(b.query.image.clone());
        images.push(b.positive.image.clone());
        for n in &b.negatives {
            images.push(n.image.clone());
        }
    }
    let refs: Vec<&ImageBuf> = images.iter().collect();
    let x_data = model.batch_tensor(&refs)?;
    let total_rows = refs.len();

    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let x = g.leaf(x_data);
    let out = model.forward_embed(&mut g, &bound, x, true);
    let descs = out.descriptors;

    // triplet hinge per (q, p, n_i), averaged over all triplets
    let total_triplets: usize = batches.iter().map(|b| b.negatives.len()).sum();
    let mut triplet_sum: Option<crate::nn::Var> = None;
    for (b, &base) in batches.iter().zip(&offsets) {
        let q = g.slice_rows(descs, base, 1);
        let p = g.slice_rows(descs, base + 1, 1);
        let dqp = {
            let d = g.sub(q, p);
            let s = g.square(d);
            let sum = g.sum_all(s);
            g.sqrt(sum)
        };
        for i in 0..b.negatives.len() {
            let n = g.slice_rows(descs, base + 2 + i, 1);
            let dqn = {
                let d = g.sub(q, n);
                let s = g.square(d);
                let sum = g.sum_all(s);
                g.sqrt(sum)
            };
            let gap = g.sub(dqp, dqn);
            let shifted = g.add_scalar(gap, config.margin);
            let hinge = g.relu(shifted);
            triplet_sum = Some(match triplet_sum {
                Some(acc) => g.add(acc, hinge),
                None => hinge,
            });
        }
    }
    let l_t = g.scale(triplet_sum.expect("at least one triplet"), 1.0 / total_triplets as f64);

    let total = match config.dann_mode {
        DannMode::Off => l_t,
        mode => {
            // one classifier pass over every descriptor row; the weighted
            // cross-entropy reproduces the per-triplet (full) or per-query
            // (only-positive) mean
            let probs = model.forward_domain_probs(&mut g, &bound, descs);
            let mut targets = vec![SATELLITE_CLASS; total_rows];
            let mut weights = vec![0.0; total_rows];
            match mode {
                DannMode::Full => {
                    let t = total_triplets as f64;
                    for (b, &base) in batches.iter().zip(&offsets) {
                        let k = b.negatives.len() as f64;
                        targets[base] = THERMAL_CLASS;
                        weights[base] = k / t;
                        weights[base + 1] = k / t;
                        for i in 0..b.negatives.len() {
                            weights[base + 2 + i] = 1.0 / t;
                        }
                    }
                }
                DannMode::OnlyPositive => {
                    let bq = batches.len() as f64;
                    for &base in &offsets {
                        targets[base] = THERMAL_CLASS;
                        weights[base] = 1.0 / bq;
                        weights[base + 1] = 1.0 / bq;
                    }
                }
                DannMode::Off => unreachable!(),
            }
            let dann = g.cross_entropy_weighted(probs, targets, weights);
            let weighted = g.scale(dann, config.lambda2);
            g.add(l_t, weighted)
        }
    };

    g.backward(total);
    adam.step(&mut model.store, &g, &bound);
    Ok(g.value(total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{pair_crops, tile_map};
    use crate::sgm::BackboneKind;
    use crate::synthmap::{generate_world, WorldSpec};

    fn synth_pairs(size: usize, crop: usize, stride: usize) -> Vec<PairedCrop> {
        let spec = WorldSpec {
            seed: 17,
            size_px: (size, size),
            thermal_noise_std: 0.01,
            ..Default::default()
        };
        let (sat, thermal) = generate_world(&spec).unwrap();
        let st = tile_map(&sat, crop, stride).unwrap();
        let tt = tile_map(&thermal, crop, stride).unwrap();
        pair_crops(&st, &tt).unwrap()
    }

    fn tiny_config() -> SgmConfig {
        SgmConfig {
            c_target: 4,
            num_clusters: 4,
            c_final: 16,
            epochs: 2,
            queries_per_epoch: 8,
            cache_size: 64,
            batch_queries: 2,
            negatives_per_query: 3,
            backbone: BackboneKind::Tiny { base_width: 4 },
            kmeans_init: false,
            ..SgmConfig::desk()
        }
    }

    #[test]
    fn short_training_runs() {
        let pairs = synth_pairs(160, 32, 32); // 25 tiles, 32 m apart
        let cfg = tiny_config();
        let (_, stats) = train_sgm(&cfg, &pairs, &[], &[], None).unwrap();
        assert!(!stats.loss_history.is_empty());
        assert!(stats.loss_history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn generated_flag_requires_pairs() {
        let pairs = synth_pairs(160, 32, 32);
        let cfg = SgmConfig { use_generated: true, ..tiny_config() };
        assert!(matches!(
            train_sgm(&cfg, &pairs, &[], &[], None),
            Err(SgmError::EmptyGenerated)
        ));
    }

    #[test]
    fn training_with_generated_pool_mixes() {
        let pairs = synth_pairs(160, 32, 32);
        // fake a generated pool by re-tagging the same pairs
        let generated: Vec<PairedCrop> = pairs
            .iter()
            .map(|p| PairedCrop { source: crate::geodata::CropSource::Generated, ..p.clone() })
            .collect();
        let cfg = SgmConfig {
            use_generated: true,
            generated_mix_ratio: 0.5,
            ..tiny_config()
        };
        let (_, stats) = train_sgm(&cfg, &pairs, &generated, &[], None).unwrap();
        assert!(!stats.loss_history.is_empty());
    }

    #[test]
    fn validation_tracks_best_epoch() {
        let pairs = synth_pairs(160, 32, 32);
        let cfg = SgmConfig { epochs: 2, ..tiny_config() };
        let (_, stats) = train_sgm(&cfg, &pairs, &[], &pairs, None).unwrap();
        assert_eq!(stats.val_recalls.len(), 2);
        assert!(stats.best_epoch.is_some());
    }

    #[test]
    fn build_index_records_fingerprint_and_dims() {
        let pairs = synth_pairs(160, 32, 32);
        let cfg = tiny_config();
        let mut model = EmbeddingModel::new(&cfg).unwrap();
        let tiles: Vec<GeoTile> = pairs.iter().map(|p| p.satellite.clone()).collect();
        let index = build_index(&mut model, &tiles).unwrap();
        assert_eq!(index.len(), tiles.len());
        assert_eq!(index.c_final(), 16);
        assert_eq!(index.fingerprint_hex(), model.fingerprint());
        // deterministic rebuild
        let again = build_index(&mut model, &tiles).unwrap();
        assert_eq!(index, again);
        assert!(matches!(
            build_index(&mut model, &[]),
            Err(SgmError::EmptyDataset)
        ));
    }

    #[test]
    fn dann_mode_changes_only_dann_inputs() {
        // loss decomposition: with identical mined batches and weights, the
        // full and only-positive modes share the triplet term and differ
        // only through the negative rows of the DANN term.
        let pairs = synth_pairs(160, 32, 32);
        let cfg = tiny_config();
        let mut model = EmbeddingModel::new(&cfg).unwrap();
        let cache = mining::refresh_cache(&mut model,
            &pairs.iter().map(|p| p.satellite.clone()).collect::<Vec<_>>(), 64, 1, 0).unwrap();
        let q_tile = pairs[12].thermal.clone();
        let q_desc: Vec<f32> = model
            .embed_image(&q_tile.image)
            .unwrap()
            .iter()
            .map(|&v| v as f32)
            .collect();
        let batch = match mining::mine_triplets(
            &q_desc, q_tile.position, &q_tile, &cache, 35.0, 50.0, 3,
        )
        .unwrap()
        {
            MineOutcome::Mined(b) => b,
            _ => panic!("expected mined batch"),
        };

        let loss_of = |mode: DannMode, lambda2: f64| -> f64 {
            let cfg2 = SgmConfig { dann_mode: mode, lambda2, ..cfg.clone() };
            let mut m2 = EmbeddingModel::new(&cfg2).unwrap();
            let mut adam = Adam::new(&m2.store, 0.0, 0.9, 0.999); // lr 0: pure evaluation
            train_step(&mut m2, &mut adam, &cfg2, std::slice::from_ref(&batch)).unwrap()
        };
        let l_t = loss_of(DannMode::Off, 0.1);
        let l_full = loss_of(DannMode::Full, 0.1);
        let l_op = loss_of(DannMode::OnlyPositive, 0.1);
        // same seed -> same embedding weights -> same triplet term
        let l_full0 = loss_of(DannMode::Full, 0.0);
        let l_op0 = loss_of(DannMode::OnlyPositive, 0.0);
        assert!((l_full0 - l_t).abs() < 1e-12);
        assert!((l_op0 - l_t).abs() < 1e-12);
        // both modes add a positive cross-entropy term, and they differ
        assert!(l_full > l_t && l_op > l_t);
        assert!((l_full - l_op).abs() > 1e-9);
    }
}
