//! Temporary timing probe (deleted before finish).

use std::time::Instant;

use stgl_core::evalkit::{self, EvalQuery};
use stgl_core::geodata::{pair_crops, tile_map, PairedCrop};
use stgl_core::imagebuf::ImageBuf;
use stgl_core::sgm::{build_index, train_sgm, BackboneKind, DannMode, SgmConfig};
use stgl_core::synthmap::{generate_world, WorldSpec};
use stgl_core::tgm::{train_tgm, TgmConfig};

fn world_pairs(h: usize, w: usize, crop: usize, stride: usize, seed: u64) -> Vec<PairedCrop> {
    let spec = WorldSpec {
        seed,
        size_px: (h, w),
        thermal_noise_std: 0.01,
        ..Default::default()
    };
    let (sat, thermal) = generate_world(&spec).unwrap();
    let st = tile_map(&sat, crop, stride).unwrap();
    let tt = tile_map(&thermal, crop, stride).unwrap();
    pair_crops(&st, &tt).unwrap()
}

#[test]
#[ignore]
fn time_sgm_epochs() {
    let pairs = world_pairs(288, 256, 64, 32, 100);
    eprintln!("pairs: {}", pairs.len());
    let cfg = SgmConfig {
        c_target: 8,
        num_clusters: 8,
        c_final: 64,
        epochs: 200,
        queries_per_epoch: 56,
        cache_size: 5000,
        batch_queries: 4,
        negatives_per_query: 10,
        learning_rate: 1e-3,
        dann_mode: DannMode::Off,
        backbone: BackboneKind::Tiny { base_width: 8 },
        kmeans_init: false,
        seed: 7,
        ..SgmConfig::desk()
    };
    let t0 = Instant::now();
    let (mut model, stats) = train_sgm(&cfg, &pairs, &[], &[], None).unwrap();
    eprintln!(
        "10 epochs took {:?} ({} steps, skipped {})",
        t0.elapsed(),
        stats.loss_history.len(),
        stats.skipped_queries
    );
    eprintln!("first losses {:?}", &stats.loss_history[..4.min(stats.loss_history.len())]);
    eprintln!(
        "last losses {:?}",
        &stats.loss_history[stats.loss_history.len().saturating_sub(4)..]
    );

    let tiles: Vec<_> = pairs.iter().map(|p| p.satellite.clone()).collect();
    let t1 = Instant::now();
    let index = build_index(&mut model, &tiles).unwrap();
    eprintln!("index build {:?}", t1.elapsed());
    let images: Vec<&ImageBuf> = pairs.iter().map(|p| &p.thermal.image).collect();
    let descs = model.embed_images(&images).unwrap();
    let queries: Vec<EvalQuery> = descs
        .into_iter()
        .zip(&pairs)
        .map(|(descriptor, p)| EvalQuery { descriptor, truth: p.thermal.position })
        .collect();
    let mut results = Vec::new();
    for q in &queries {
        results.push(index.knn(&q.descriptor, 5).unwrap());
    }
    let truths: Vec<(f64, f64)> = queries.iter().map(|q| q.truth).collect();
    let r1 = evalkit::recall_at_n(&results, &truths, 1, 50.0).unwrap();
    let r5 = evalkit::recall_at_n(&results, &truths, 5, 50.0).unwrap();
    eprintln!("after 10 epochs: R@1 {r1:.1} R@5 {r5:.1}");
}

#[test]
#[ignore]
fn time_tgm_steps() {
    let pairs = world_pairs(256, 256, 64, 64, 200);
    eprintln!("pairs: {}", pairs.len());
    let cfg = TgmConfig {
        epochs: 125, // 4 steps per epoch at batch 4 -> 500 steps
        decay_start_epoch: 125,
        batch_size: 4,
        train_resolution: 64,
        output_resolution: 64,
        unet_depth: 4,
        unet_base_width: 16,
        disc_layers: 2,
        disc_base_width: 16,
        seed: 3,
        ..TgmConfig::paper_scale()
    };
    let t0 = Instant::now();
    let (_, stats) = train_tgm(&cfg, &pairs, None).unwrap();
    eprintln!("{} steps took {:?}", stats.steps, t0.elapsed());
    eprintln!("L1 first {:?}", &stats.l1_history[..3]);
    let w = 50.min(stats.l1_history.len());
    let tail: f64 = stats.l1_history[stats.l1_history.len() - w..].iter().sum::<f64>() / w as f64;
    eprintln!("L1 last {:?}", &stats.l1_history[stats.l1_history.len() - 3..]);
    eprintln!("running mean(last {w}) = {tail:.5}, step1 = {:.5}, ratio = {:.3}", stats.l1_history[0], tail / stats.l1_history[0]);
}
