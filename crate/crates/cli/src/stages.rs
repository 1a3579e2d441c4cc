//! Pipeline stages: synthesize/load maps, tile, train, generate, index,
//! evaluate. Each stage leaves an artifact under the experiment's output
//! directory and is skipped when that artifact already exists (unless
//! forced), so a failed run resumes where it stopped.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use stgl_core::enhance::contrast_enhance;
use stgl_core::evalkit::{self, EvalQuery, EvalReport};
use stgl_core::geodata::{
    self, load_raster, save_raster, DatasetSplit, GeoTile, PairedCrop, RasterMap, Rect, SplitSpec,
};
use stgl_core::imagebuf::ImageBuf;
use stgl_core::retrieval::DescriptorIndex;
use stgl_core::sgm::{self, EmbeddingModel};
use stgl_core::synthmap::generate_world;
use stgl_core::tgm::{self, TgmModel};

use crate::config::ExperimentConfig;

/// Pipeline stage, each with a distinct nonzero exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Synthmap,
    Geodata,
    Tgm,
    Sgm,
    Index,
    Eval,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Synthmap => 3,
            Stage::Geodata => 4,
            Stage::Tgm => 5,
            Stage::Sgm => 6,
            Stage::Index => 7,
            Stage::Eval => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Synthmap => "synthmap",
            Stage::Geodata => "geodata",
            Stage::Tgm => "train-tgm",
            Stage::Sgm => "train-sgm",
            Stage::Index => "build-index",
            Stage::Eval => "evaluate",
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub err: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {:#}", self.stage.name(), self.err)
    }
}

pub type StageResult<T> = Result<T, StageError>;

pub trait IntoStage<T> {
    fn stage(self, s: Stage) -> StageResult<T>;
}

impl<T, E: Into<anyhow::Error>> IntoStage<T> for Result<T, E> {
    fn stage(self, s: Stage) -> StageResult<T> {
        self.map_err(|e| StageError { stage: s, err: e.into() })
    }
}

/// Resolved input paths after the synthmap stage.
pub struct MapPaths {
    pub satellite: PathBuf,
    pub thermal: PathBuf,
    pub unpaired: Option<PathBuf>,
    pub split_spec: PathBuf,
}

/// Synthesize the procedural world when configured; otherwise pass the
/// configured map paths through. Writes a default 60/20/20 x-band split
/// next to the maps when none is configured.
pub fn ensure_maps(cfg: &ExperimentConfig, force: bool) -> StageResult<MapPaths> {
    let dir = cfg.maps_dir();
    let (satellite, thermal) = match (&cfg.data.satellite_map, &cfg.data.thermal_map) {
        (Some(s), Some(t)) => (s.clone(), t.clone()),
        _ => (dir.join("satellite.png"), dir.join("thermal.png")),
    };
    let unpaired = match &cfg.data.unpaired_satellite_map {
        Some(p) => Some(p.clone()),
        None if cfg.ablation.use_generated && cfg.world.is_some() => {
            Some(dir.join("satellite_unpaired.png"))
        }
        None => None,
    };

    if let Some(world) = &cfg.world {
        std::fs::create_dir_all(&dir).stage(Stage::Synthmap)?;
        if force || !satellite.exists() || !thermal.exists() {
            log::info!("synthesizing world seed {} into {}", world.seed, dir.display());
            let (sat_map, thermal_map) = generate_world(world).stage(Stage::Synthmap)?;
            save_raster(&sat_map, &satellite).stage(Stage::Synthmap)?;
            save_raster(&thermal_map, &thermal).stage(Stage::Synthmap)?;
        } else {
            log::info!("maps exist, skipping synthmap (use --force to regenerate)");
        }
        if let Some(up) = &unpaired {
            if cfg.data.unpaired_satellite_map.is_none() && (force || !up.exists()) {
                // an adjacent region with its own seed, offset east of the
                // main world so positions never overlap
                let mut spec = world.clone();
                spec.seed = world.seed.wrapping_add(1);
                let (mut sat_map, _) = generate_world(&spec).stage(Stage::Synthmap)?;
                sat_map.origin.0 +=
                    spec.meters_per_pixel * spec.size_px.1 as f64 + 10_000.0;
                save_raster(&sat_map, up).stage(Stage::Synthmap)?;
            }
        }
    } else if !satellite.exists() || !thermal.exists() {
        return Err(StageError {
            stage: Stage::Geodata,
            err: anyhow!(
                "maps not found: {} / {}",
                satellite.display(),
                thermal.display()
            ),
        });
    }

    let split_spec = match &cfg.data.split_spec {
        Some(p) => p.clone(),
        None => {
            let path = dir.join("splits.toml");
            if force || !path.exists() {
                let map = load_raster(&satellite).stage(Stage::Geodata)?;
                std::fs::create_dir_all(&dir).stage(Stage::Synthmap)?;
                std::fs::write(&path, default_split(&map).to_toml_string())
                    .stage(Stage::Synthmap)?;
            }
            path
        }
    };

    Ok(MapPaths { satellite, thermal, unpaired, split_spec })
}

/// 60/20/20 split along the x axis of the map extent.
fn default_split(map: &RasterMap) -> SplitSpec {
    let w_m = map.meters_per_pixel * map.pixels.width() as f64;
    let x0 = map.origin.0;
    let big = 1e12;
    let x_train = x0 + 0.6 * w_m;
    let x_val = x0 + 0.8 * w_m;
    SplitSpec {
        train: vec![Rect::new(-big, -big, x_train, big)],
        val: vec![Rect::new(x_train, -big, x_val, big)],
        test: vec![Rect::new(x_val, -big, big, big)],
    }
}

/// Tile both maps, pair by offset, and split by region.
pub fn load_splits(cfg: &ExperimentConfig, paths: &MapPaths) -> StageResult<DatasetSplit> {
    let sat = load_raster(&paths.satellite).stage(Stage::Geodata)?;
    let thermal = load_raster(&paths.thermal).stage(Stage::Geodata)?;
    let st = geodata::tile_map(&sat, cfg.data.crop_size, cfg.data.stride).stage(Stage::Geodata)?;
    let tt =
        geodata::tile_map(&thermal, cfg.data.crop_size, cfg.data.stride).stage(Stage::Geodata)?;
    let pairs = geodata::pair_crops(&st, &tt).stage(Stage::Geodata)?;
    let spec_text = std::fs::read_to_string(&paths.split_spec)
        .with_context(|| format!("reading split spec {}", paths.split_spec.display()))
        .stage(Stage::Geodata)?;
    let spec = SplitSpec::from_toml_str(&spec_text)
        .map_err(|e| anyhow!("parsing split spec: {e}"))
        .stage(Stage::Geodata)?;
    let split = geodata::split_by_region(&pairs, &spec).stage(Stage::Geodata)?;
    let (tr, va, te) = split.counts();
    log::info!("splits: {tr} train / {va} val / {te} test pairs");
    Ok(split)
}

/// Apply the experiment's contrast enhancement to the thermal side of each
/// pair (real pairs only; generated pairs already carry the right domain).
pub fn enhance_pairs(cfg: &ExperimentConfig, pairs: &[PairedCrop]) -> Result<Vec<PairedCrop>> {
    if !cfg.ce.enabled {
        return Ok(pairs.to_vec());
    }
    pairs
        .iter()
        .map(|p| {
            let enhanced = contrast_enhance(&p.thermal.image, cfg.ce.factor)?;
            Ok(PairedCrop {
                thermal: GeoTile { image: enhanced, ..p.thermal.clone() },
                ..p.clone()
            })
        })
        .collect()
}

pub fn tgm_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.tgm_dir().join("tgm.ckpt")
}

/// Train the generator on invalid-filtered training pairs.
pub fn stage_train_tgm(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    force: bool,
) -> StageResult<PathBuf> {
    let path = tgm_checkpoint_path(cfg);
    if path.exists() && !force {
        log::info!("tgm checkpoint exists, skipping train-tgm");
        return Ok(path);
    }
    let filtered = geodata::filter_invalid(&split.train, cfg.data.max_invalid_fraction)
        .stage(Stage::Tgm)?;
    log::info!(
        "train-tgm: {} pairs after invalid filter (threshold {})",
        filtered.len(),
        cfg.data.max_invalid_fraction
    );
    std::fs::create_dir_all(cfg.tgm_dir()).stage(Stage::Tgm)?;
    let (_, stats) = tgm::train_tgm(&cfg.tgm, &filtered, Some(&cfg.tgm_dir())).stage(Stage::Tgm)?;
    log::info!(
        "train-tgm finished: {} steps, final L1 {:.4}",
        stats.steps,
        stats.l1_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(path)
}

/// Generated-pair persistence: a CSV manifest plus 16-bit thermal PNGs.
const GENERATED_MANIFEST: &str = "manifest.csv";

/// Run the trained generator over the unpaired satellite tiles and persist
/// the generated thermal tiles.
pub fn stage_generate(cfg: &ExperimentConfig, paths: &MapPaths, force: bool) -> StageResult<PathBuf> {
    let dir = cfg.generated_dir();
    let manifest = dir.join(GENERATED_MANIFEST);
    if manifest.exists() && !force {
        log::info!("generated dataset exists, skipping generate");
        return Ok(dir);
    }
    let unpaired_path = paths.unpaired.as_ref().ok_or_else(|| StageError {
        stage: Stage::Tgm,
        err: anyhow!("generated dataset requested but no unpaired satellite map configured"),
    })?;
    let (mut model, _) = TgmModel::load(&tgm_checkpoint_path(cfg)).stage(Stage::Tgm)?;
    let unpaired = load_raster(unpaired_path).stage(Stage::Geodata)?;
    let tiles =
        geodata::tile_map(&unpaired, cfg.data.crop_size, cfg.data.stride).stage(Stage::Geodata)?;
    log::info!("generating thermal tiles for {} unpaired satellite tiles", tiles.len());
    let pairs =
        tgm::generate_dataset(&mut model, &tiles, cfg.ce.enabled, cfg.ce.factor).stage(Stage::Tgm)?;

    std::fs::create_dir_all(&dir).stage(Stage::Tgm)?;
    let mut rows = String::from("tile_id,row,col,x,y,thermal_png\n");
    for p in &pairs {
        let name = format!("gen_{:06}.png", p.thermal.tile_id);
        save_image_gray16(&p.thermal.image, &dir.join(&name)).stage(Stage::Tgm)?;
        rows.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.thermal.tile_id,
            p.thermal.pixel_offset.0,
            p.thermal.pixel_offset.1,
            p.thermal.position.0,
            p.thermal.position.1,
            name
        ));
    }
    std::fs::write(&manifest, rows).stage(Stage::Tgm)?;
    Ok(dir)
}

/// Reassemble generated pairs: satellite side re-tiled from the unpaired
/// map, thermal side loaded from the persisted PNGs.
pub fn load_generated(cfg: &ExperimentConfig, paths: &MapPaths) -> StageResult<Vec<PairedCrop>> {
    let dir = cfg.generated_dir();
    let manifest = dir.join(GENERATED_MANIFEST);
    let unpaired_path = paths.unpaired.as_ref().ok_or_else(|| StageError {
        stage: Stage::Sgm,
        err: anyhow!("no unpaired satellite map configured"),
    })?;
    let unpaired = load_raster(unpaired_path).stage(Stage::Geodata)?;
    let tiles =
        geodata::tile_map(&unpaired, cfg.data.crop_size, cfg.data.stride).stage(Stage::Geodata)?;
    let text = std::fs::read_to_string(&manifest)
        .with_context(|| format!("reading {}", manifest.display()))
        .stage(Stage::Sgm)?;
    let mut pairs = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(StageError {
                stage: Stage::Sgm,
                err: anyhow!("malformed generated manifest line: {line:?}"),
            });
        }
        let tile_id: u64 = fields[0].parse().context("tile_id").stage(Stage::Sgm)?;
        let sat = tiles
            .iter()
            .find(|t| t.tile_id == tile_id)
            .ok_or_else(|| StageError {
                stage: Stage::Sgm,
                err: anyhow!("generated manifest references unknown tile {tile_id}"),
            })?
            .clone();
        let thermal_img = load_image_any(&dir.join(fields[5])).stage(Stage::Sgm)?;
        pairs.push(PairedCrop {
            thermal: GeoTile {
                image: thermal_img,
                pixel_offset: sat.pixel_offset,
                position: sat.position,
                tile_id: sat.tile_id,
                invalid_fraction: 0.0,
            },
            satellite: sat,
            source: stgl_core::geodata::CropSource::Generated,
            invalid_fraction: 0.0,
        });
    }
    Ok(pairs)
}

/// Train the embedding model on enhanced real pairs plus any generated pairs.
pub fn stage_train_sgm(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    generated: &[PairedCrop],
    force: bool,
) -> StageResult<PathBuf> {
    let path = cfg.sgm_checkpoint();
    if path.exists() && !force {
        log::info!("sgm checkpoint exists, skipping train-sgm");
        return Ok(path);
    }
    std::fs::create_dir_all(path.parent().expect("checkpoint has a parent")).stage(Stage::Sgm)?;
    let train = enhance_pairs(cfg, &split.train).stage(Stage::Sgm)?;
    let val = enhance_pairs(cfg, &split.val).stage(Stage::Sgm)?;
    let (_, stats) = sgm::train_sgm(
        &cfg.sgm,
        &train,
        generated,
        &val,
        Some(path.parent().expect("checkpoint has a parent")),
    )
    .stage(Stage::Sgm)?;
    log::info!(
        "train-sgm finished: {} steps, {} skipped queries, best epoch {:?}",
        stats.loss_history.len(),
        stats.skipped_queries,
        stats.best_epoch
    );
    Ok(path)
}

/// Embed the chosen split's satellite tiles into the persisted index.
pub fn stage_build_index(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    which: &str,
    force: bool,
) -> StageResult<PathBuf> {
    let path = cfg.index_path();
    if path.exists() && !force {
        log::info!("index exists, skipping build-index");
        return Ok(path);
    }
    std::fs::create_dir_all(path.parent().expect("index has a parent")).stage(Stage::Index)?;
    let (mut model, _) = EmbeddingModel::load(&cfg.sgm_checkpoint()).stage(Stage::Index)?;
    let tiles: Vec<GeoTile> = split_part(split, which)
        .stage(Stage::Index)?
        .iter()
        .map(|p| p.satellite.clone())
        .collect();
    log::info!("embedding {} database tiles", tiles.len());
    let index = sgm::build_index(&mut model, &tiles).stage(Stage::Index)?;
    index.save(&path).stage(Stage::Index)?;
    Ok(path)
}

fn split_part<'a>(split: &'a DatasetSplit, which: &str) -> Result<&'a [PairedCrop]> {
    match which {
        "train" => Ok(&split.train),
        "val" => Ok(&split.val),
        "test" => Ok(&split.test),
        other => bail!("unknown split {other:?} (train|val|test)"),
    }
}

pub struct EvalArtifacts {
    pub report: EvalReport,
    pub embed_ms_per_query: f64,
    pub match_ms_per_query: f64,
}

/// Evaluate the checkpoint against the persisted index on a split's thermal
/// queries. Refuses an index whose fingerprint does not match the model.
pub fn stage_evaluate(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    which: &str,
) -> StageResult<EvalArtifacts> {
    let (mut model, _) = EmbeddingModel::load(&cfg.sgm_checkpoint()).stage(Stage::Eval)?;
    let index = DescriptorIndex::load(&cfg.index_path()).stage(Stage::Eval)?;
    if index.fingerprint_hex() != model.fingerprint() {
        return Err(StageError {
            stage: Stage::Eval,
            err: anyhow!(
                "index fingerprint {} does not match checkpoint {}; rebuild the index",
                &index.fingerprint_hex()[..12],
                &model.fingerprint()[..12]
            ),
        });
    }
    let pairs = enhance_pairs(cfg, split_part(split, which).stage(Stage::Eval)?)
        .stage(Stage::Eval)?;
    if pairs.is_empty() {
        return Err(StageError {
            stage: Stage::Eval,
            err: anyhow!("split {which:?} holds no query pairs"),
        });
    }

    let embed_t0 = Instant::now();
    let images: Vec<&ImageBuf> = pairs.iter().map(|p| &p.thermal.image).collect();
    let descs = model.embed_images(&images).stage(Stage::Eval)?;
    let embed_ms = embed_t0.elapsed().as_secs_f64() * 1000.0 / pairs.len() as f64;

    let queries: Vec<EvalQuery> = descs
        .into_iter()
        .zip(&pairs)
        .map(|(descriptor, p)| EvalQuery { descriptor, truth: p.thermal.position })
        .collect();

    let match_t0 = Instant::now();
    let report = EvalReport::compute(&index, &queries, cfg.prior_radius_m, &cfg.cell_label())
        .stage(Stage::Eval)?;
    let match_ms = match_t0.elapsed().as_secs_f64() * 1000.0 / queries.len() as f64;

    let dir = cfg.report_dir();
    std::fs::create_dir_all(&dir).stage(Stage::Eval)?;
    std::fs::write(dir.join("report.txt"), report.render_table(cfg.prior_radius_m))
        .stage(Stage::Eval)?;
    let mut kv = report.render_kv();
    kv.push_str(&format!("embed_ms_per_query = {embed_ms:.3}\n"));
    kv.push_str(&format!("match_ms_per_query = {match_ms:.3}\n"));
    std::fs::write(dir.join("report.kv"), kv).stage(Stage::Eval)?;
    let mut errors_csv = String::from("error_m\n");
    for e in &report.per_query_errors {
        errors_csv.push_str(&format!("{e}\n"));
    }
    std::fs::write(dir.join("errors.csv"), errors_csv).stage(Stage::Eval)?;
    let edges = vec![0.0, 25.0, 50.0, 100.0];
    let counts = evalkit::error_histogram(&report.per_query_errors, &edges).stage(Stage::Eval)?;
    std::fs::write(dir.join("histogram.csv"), evalkit::histogram_csv(&edges, &counts))
        .stage(Stage::Eval)?;
    evalkit::histogram_png(&counts, &dir.join("histogram.png")).stage(Stage::Eval)?;

    Ok(EvalArtifacts { report, embed_ms_per_query: embed_ms, match_ms_per_query: match_ms })
}

/// The whole pipeline: maps, tiling/splits, optional generator branch,
/// embedding training, index, evaluation.
pub fn run_pipeline(cfg: &ExperimentConfig, force: bool) -> StageResult<EvalArtifacts> {
    cfg.write_snapshot().stage(Stage::Config)?;
    let paths = ensure_maps(cfg, force)?;
    let split = load_splits(cfg, &paths)?;
    let generated = if cfg.ablation.use_generated {
        stage_train_tgm(cfg, &split, force)?;
        stage_generate(cfg, &paths, force)?;
        load_generated(cfg, &paths)?
    } else {
        Vec::new()
    };
    stage_train_sgm(cfg, &split, &generated, force)?;
    stage_build_index(cfg, &split, "test", force)?;
    stage_evaluate(cfg, &split, "test")
}

/// Load any 8/16-bit gray or RGB PNG as a normalized image.
pub fn load_image_any(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            ImageBuf::from_fn(1, h, w, |_, y, x| g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            ImageBuf::from_fn(1, h, w, |_, y, x| {
                g.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            ImageBuf::from_fn(3, h, w, |c, y, x| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            })
        }
    })
}

/// Write a 1-channel image as 16-bit gray PNG.
pub fn save_image_gray16(img: &ImageBuf, path: &Path) -> Result<()> {
    anyhow::ensure!(img.channels() == 1, "expected 1-channel image");
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
            image::Luma([(img.get(0, y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round()
                as u16])
        });
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}
