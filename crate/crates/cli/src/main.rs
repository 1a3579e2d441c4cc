//! `stgl` — satellite-thermal geo-localization pipeline.
//!
//! Subcommands mirror the pipeline stages: `synthmap`, `tile`, `train-tgm`,
//! `generate`, `train-sgm`, `build-index`, `query`, `evaluate`, `histogram`,
//! and `run` (everything end to end). Exit codes: 0 on success, a distinct
//! nonzero code per failed stage (config 2, synthmap 3, geodata 4, tgm 5,
//! sgm 6, index 7, evaluate 8). Logs go to stderr, reports to files.

mod config;
mod stages;

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Overrides};
use stages::{IntoStage, Stage, StageError, StageResult};
use stgl_core::evalkit;
use stgl_core::geodata::{load_raster, tile_map};
use stgl_core::retrieval::DescriptorIndex;
use stgl_core::sgm::EmbeddingModel;

#[derive(Parser)]
#[command(name = "stgl", version, about = "satellite-thermal geo-localization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a procedural satellite/thermal map pair plus manifests
    /// and a default split spec.
    Synthmap {
        /// Experiment config with a [world] block.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Regenerate even if the maps already exist.
        #[arg(long)]
        force: bool,
    },
    /// Tile a raster into geo-referenced crops and write a CSV manifest.
    Tile {
        /// Raster path (PNG with `.meta` sidecar).
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 512)]
        crop_size: usize,
        #[arg(long, default_value_t = 35)]
        stride: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Also dump each crop as a PNG into this directory.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Train the thermal generator on the training split.
    TrainTgm {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        force: bool,
    },
    /// Run the trained generator over unpaired satellite tiles.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        force: bool,
    },
    /// Train the embedding model on real (plus generated) pairs.
    TrainSgm {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        force: bool,
    },
    /// Embed a split's satellite tiles into the descriptor index.
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Which split provides the database tiles.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        force: bool,
    },
    /// Embed one thermal image and print its nearest database tiles.
    Query {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Thermal query image (PNG).
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Prior-region center x (meters); requires --prior-y.
        #[arg(long)]
        prior_x: Option<f64>,
        #[arg(long)]
        prior_y: Option<f64>,
        /// Prior-region radius in meters.
        #[arg(long)]
        prior_radius: Option<f64>,
    },
    /// Compute R@N, prior-constrained recall, and L2 error on a split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Bin per-query errors from a CSV into a histogram (CSV + PNG).
    Histogram {
        /// CSV with one error per line (header allowed).
        #[arg(long)]
        errors: PathBuf,
        /// Comma-separated ascending bin edges in meters.
        #[arg(long, default_value = "0,25,50,100")]
        edges: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Full pipeline: maps, tiling, training, index, evaluation.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Re-run stages even when their artifacts exist.
        #[arg(long)]
        force: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.stage.exit_code());
    }
}

fn load_config(path: &PathBuf, overrides: &Overrides) -> StageResult<ExperimentConfig> {
    ExperimentConfig::load(path, overrides).stage(Stage::Config)
}

fn dispatch(cli: Cli) -> StageResult<()> {
    match cli.command {
        Command::Synthmap { config, overrides, force } => {
            let cfg = load_config(&config, &overrides)?;
            if cfg.world.is_none() {
                return Err(StageError {
                    stage: Stage::Config,
                    err: anyhow!("synthmap requires a [world] block in the config"),
                });
            }
            let paths = stages::ensure_maps(&cfg, force)?;
            println!("satellite: {}", paths.satellite.display());
            println!("thermal:   {}", paths.thermal.display());
            if let Some(u) = &paths.unpaired {
                println!("unpaired:  {}", u.display());
            }
            println!("splits:    {}", paths.split_spec.display());
            Ok(())
        }
        Command::Tile { map, crop_size, stride, out, dump_dir } => {
            let raster = load_raster(&map).stage(Stage::Geodata)?;
            let tiles = tile_map(&raster, crop_size, stride).stage(Stage::Geodata)?;
            let mut csv = String::from("tile_id,row,col,x,y,invalid_fraction\n");
            for t in &tiles {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    t.tile_id,
                    t.pixel_offset.0,
                    t.pixel_offset.1,
                    t.position.0,
                    t.position.1,
                    t.invalid_fraction
                ));
            }
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).stage(Stage::Geodata)?;
            }
            std::fs::write(&out, csv).stage(Stage::Geodata)?;
            if let Some(dir) = dump_dir {
                std::fs::create_dir_all(&dir).stage(Stage::Geodata)?;
                for t in &tiles {
                    let path = dir.join(format!("tile_{:06}.png", t.tile_id));
                    if t.image.channels() == 1 {
                        stages::save_image_gray16(&t.image, &path).stage(Stage::Geodata)?;
                    } else {
                        let m = stgl_core::geodata::RasterMap::new(
                            t.image.clone(),
                            raster.meters_per_pixel,
                            t.position,
                            None,
                        )
                        .stage(Stage::Geodata)?;
                        stgl_core::geodata::save_raster(&m, &path).stage(Stage::Geodata)?;
                    }
                }
            }
            println!("{} tiles -> {}", tiles.len(), out.display());
            Ok(())
        }
        Command::TrainTgm { config, overrides, force } => {
            let cfg = load_config(&config, &overrides)?;
            cfg.write_snapshot().stage(Stage::Config)?;
            let paths = stages::ensure_maps(&cfg, false)?;
            let split = stages::load_splits(&cfg, &paths)?;
            let path = stages::stage_train_tgm(&cfg, &split, force)?;
            println!("checkpoint: {}", path.display());
            Ok(())
        }
        Command::Generate { config, overrides, force } => {
            let cfg = load_config(&config, &overrides)?;
            let paths = stages::ensure_maps(&cfg, false)?;
            let dir = stages::stage_generate(&cfg, &paths, force)?;
            println!("generated dataset: {}", dir.display());
            Ok(())
        }
        Command::TrainSgm { config, overrides, force } => {
            let cfg = load_config(&config, &overrides)?;
            cfg.write_snapshot().stage(Stage::Config)?;
            let paths = stages::ensure_maps(&cfg, false)?;
            let split = stages::load_splits(&cfg, &paths)?;
            let generated = if cfg.ablation.use_generated {
                stages::load_generated(&cfg, &paths)?
            } else {
                Vec::new()
            };
            let path = stages::stage_train_sgm(&cfg, &split, &generated, force)?;
            println!("checkpoint: {}", path.display());
            Ok(())
        }
        Command::BuildIndex { config, overrides, split, force } => {
            let cfg = load_config(&config, &overrides)?;
            let paths = stages::ensure_maps(&cfg, false)?;
            let splits = stages::load_splits(&cfg, &paths)?;
            let path = stages::stage_build_index(&cfg, &splits, &split, force)?;
            println!("index: {}", path.display());
            Ok(())
        }
        Command::Query { config, overrides, image, k, prior_x, prior_y, prior_radius } => {
            let cfg = load_config(&config, &overrides)?;
            let (mut model, _) = EmbeddingModel::load(&cfg.sgm_checkpoint()).stage(Stage::Eval)?;
            let index = DescriptorIndex::load(&cfg.index_path()).stage(Stage::Eval)?;
            if index.fingerprint_hex() != model.fingerprint() {
                return Err(StageError {
                    stage: Stage::Eval,
                    err: anyhow!("index fingerprint does not match checkpoint; rebuild the index"),
                });
            }
            let img = stages::load_image_any(&image).stage(Stage::Eval)?;
            let img = cfg.ce.apply(&img).stage(Stage::Eval)?;
            let t0 = Instant::now();
            let desc = model.embed_image(&img).stage(Stage::Eval)?;
            let embed_ms = t0.elapsed().as_secs_f64() * 1000.0;
            let t1 = Instant::now();
            let result = match (prior_x, prior_y, prior_radius) {
                (Some(x), Some(y), Some(r)) => {
                    index.knn_within(&desc, k, (x, y), r).stage(Stage::Eval)?
                }
                (None, None, None) => index.knn(&desc, k).stage(Stage::Eval)?,
                _ => {
                    return Err(StageError {
                        stage: Stage::Eval,
                        err: anyhow!(
                            "--prior-x, --prior-y, --prior-radius must be given together"
                        ),
                    })
                }
            };
            let match_ms = t1.elapsed().as_secs_f64() * 1000.0;
            if result.localization_failure {
                println!("localization failure: no database tile inside the prior region");
            }
            println!("{:>6} {:>12} {:>12} {:>12} {:>12}", "rank", "tile_id", "x", "y", "distance");
            for (rank, e) in result.entries.iter().enumerate() {
                println!(
                    "{:>6} {:>12} {:>12.1} {:>12.1} {:>12.6}",
                    rank + 1,
                    e.tile_id,
                    e.position.0,
                    e.position.1,
                    e.distance
                );
            }
            println!("embedding {embed_ms:.2} ms, matching {match_ms:.2} ms");
            Ok(())
        }
        Command::Evaluate { config, overrides, split } => {
            let cfg = load_config(&config, &overrides)?;
            let paths = stages::ensure_maps(&cfg, false)?;
            let splits = stages::load_splits(&cfg, &paths)?;
            let artifacts = stages::stage_evaluate(&cfg, &splits, &split)?;
            print!("{}", artifacts.report.render_table(cfg.prior_radius_m));
            println!(
                "embedding {:.2} ms/query, matching {:.2} ms/query",
                artifacts.embed_ms_per_query, artifacts.match_ms_per_query
            );
            println!("report written to {}", cfg.report_dir().display());
            Ok(())
        }
        Command::Histogram { errors, edges, out_dir } => {
            let text = std::fs::read_to_string(&errors)
                .with_context(|| format!("reading {}", errors.display()))
                .stage(Stage::Eval)?;
            let values: Vec<f64> =
                text.lines().filter_map(|l| l.trim().parse::<f64>().ok()).collect();
            let edges: Vec<f64> = edges
                .split(',')
                .map(|s| s.trim().parse::<f64>().context("parsing edge"))
                .collect::<Result<_, _>>()
                .stage(Stage::Eval)?;
            let counts = evalkit::error_histogram(&values, &edges).stage(Stage::Eval)?;
            std::fs::create_dir_all(&out_dir).stage(Stage::Eval)?;
            std::fs::write(
                out_dir.join("histogram.csv"),
                evalkit::histogram_csv(&edges, &counts),
            )
            .stage(Stage::Eval)?;
            evalkit::histogram_png(&counts, &out_dir.join("histogram.png")).stage(Stage::Eval)?;
            for (i, c) in counts.iter().enumerate() {
                if i + 1 < edges.len() {
                    println!("[{:>7.1}, {:>7.1}) {c}", edges[i], edges[i + 1]);
                } else {
                    println!("[{:>7.1},    inf) {c}", edges[edges.len() - 1]);
                }
            }
            Ok(())
        }
        Command::Run { config, overrides, force } => {
            let cfg = load_config(&config, &overrides)?;
            let artifacts = stages::run_pipeline(&cfg, force)?;
            print!("{}", artifacts.report.render_table(cfg.prior_radius_m));
            println!(
                "embedding {:.2} ms/query, matching {:.2} ms/query",
                artifacts.embed_ms_per_query, artifacts.match_ms_per_query
            );
            println!("artifacts under {}", cfg.out_dir.display());
            Ok(())
        }
    }
}
