//! Experiment configuration: one TOML file drives every stage; command-line
//! flags override individual fields. The ablation switches (CE, DANN mode,
//! generated dataset, lambda1) are single-sourced here and pushed into the
//! stage configs, so a config file maps one-to-one onto an ablation cell.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stgl_core::enhance::CeConfig;
use stgl_core::sgm::{DannMode, SgmConfig};
use stgl_core::synthmap::WorldSpec;
use stgl_core::tgm::TgmConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    /// Satellite raster (PNG + `.meta` sidecar). Filled in by the synthmap
    /// stage when a `[world]` block is present.
    pub satellite_map: Option<PathBuf>,
    pub thermal_map: Option<PathBuf>,
    /// Satellite raster without thermal coverage, tiled for the generated
    /// dataset.
    pub unpaired_satellite_map: Option<PathBuf>,
    /// Split rectangles (TOML). When absent and a world is synthesized, a
    /// default 60/20/20 x-band split is written next to the maps.
    pub split_spec: Option<PathBuf>,
    pub crop_size: usize,
    pub stride: usize,
    /// Generator training drops pairs above this invalid fraction.
    pub max_invalid_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            satellite_map: None,
            thermal_map: None,
            unpaired_satellite_map: None,
            split_spec: None,
            crop_size: 64,
            stride: 32,
            max_invalid_fraction: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AblationConfig {
    pub dann: DannMode,
    pub use_generated: bool,
    /// Overrides `tgm.lambda1` when set.
    pub lambda1: Option<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { dann: DannMode::Off, use_generated: false, lambda1: None }
    }
}

fn default_tgm() -> TgmConfig {
    TgmConfig::desk(64)
}

fn default_sgm() -> SgmConfig {
    SgmConfig::desk()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Report label; derived from the ablation switches when unset.
    pub label: Option<String>,
    #[serde(default)]
    pub data: DataConfig,
    /// Procedural world to synthesize before tiling (desk-scale runs).
    pub world: Option<WorldSpec>,
    #[serde(default)]
    pub ce: CeConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default = "default_tgm")]
    pub tgm: TgmConfig,
    #[serde(default = "default_sgm")]
    pub sgm: SgmConfig,
    /// Evaluation prior radius in meters.
    #[serde(default = "default_prior_radius")]
    pub prior_radius_m: f64,
}

fn default_prior_radius() -> f64 {
    stgl_core::evalkit::DEFAULT_PRIOR_RADIUS_M
}

/// Flag overrides shared by the training/evaluation subcommands.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Enable contrast enhancement of thermal images.
    #[arg(long, overrides_with = "no_ce")]
    pub ce: bool,
    /// Disable contrast enhancement.
    #[arg(long = "no-ce")]
    pub no_ce: bool,
    /// Contrast enhancement factor.
    #[arg(long)]
    pub ce_factor: Option<f64>,
    /// DANN mode: off, full, or only-positive.
    #[arg(long, value_parser = parse_dann)]
    pub dann: Option<DannMode>,
    /// Train with the generated dataset.
    #[arg(long, overrides_with = "no_generated")]
    pub generated: bool,
    /// Train without the generated dataset.
    #[arg(long = "no-generated")]
    pub no_generated: bool,
    /// L1 weight for generator training.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_dann(s: &str) -> Result<DannMode, String> {
    match s {
        "off" => Ok(DannMode::Off),
        "full" => Ok(DannMode::Full),
        "only-positive" | "only_positive" => Ok(DannMode::OnlyPositive),
        other => Err(format!("unknown DANN mode {other:?} (off|full|only-positive)")),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.apply_overrides(overrides);
        cfg.resolve()?;
        Ok(cfg)
    }

    fn apply_overrides(&mut self, ov: &Overrides) {
        if ov.ce {
            self.ce.enabled = true;
        }
        if ov.no_ce {
            self.ce.enabled = false;
        }
        if let Some(f) = ov.ce_factor {
            self.ce.factor = f;
        }
        if let Some(d) = ov.dann {
            self.ablation.dann = d;
        }
        if ov.generated {
            self.ablation.use_generated = true;
        }
        if ov.no_generated {
            self.ablation.use_generated = false;
        }
        if let Some(l) = ov.lambda1 {
            self.ablation.lambda1 = Some(l);
        }
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(dir) = &ov.out_dir {
            self.out_dir = dir.clone();
        }
    }

    /// Push the single-sourced switches into the stage configs and check
    /// cross-field consistency.
    fn resolve(&mut self) -> Result<()> {
        self.ce.validate().map_err(|e| anyhow::anyhow!(e))?;
        self.tgm.use_ce_inputs = self.ce.enabled;
        self.tgm.ce_factor = self.ce.factor;
        if let Some(l1) = self.ablation.lambda1 {
            self.tgm.lambda1 = l1;
        }
        self.tgm.seed = self.seed;
        self.tgm.output_resolution = self.data.crop_size;
        if self.tgm.train_resolution < self.data.crop_size {
            self.tgm.train_resolution = self.data.crop_size;
        }
        self.sgm.use_ce = self.ce.enabled;
        self.sgm.ce_factor = self.ce.factor;
        self.sgm.dann_mode = self.ablation.dann;
        self.sgm.use_generated = self.ablation.use_generated;
        self.sgm.seed = self.seed;
        self.tgm.validate().map_err(|e| anyhow::anyhow!(e.to_string()))?;
        self.sgm.validate().map_err(|e| anyhow::anyhow!(e.to_string()))?;
        if self.world.is_none()
            && (self.data.satellite_map.is_none() || self.data.thermal_map.is_none())
        {
            bail!("config needs either a [world] block or satellite_map + thermal_map paths");
        }
        if self.data.crop_size % 16 != 0 {
            bail!("crop_size {} must be divisible by 16", self.data.crop_size);
        }
        Ok(())
    }

    /// Ablation-cell label for reports, e.g. `ce=on,dann=only-positive,gen=on,l1=100`.
    pub fn cell_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        format!(
            "ce={},dann={},gen={},l1={}",
            if self.ce.enabled { "on" } else { "off" },
            self.ablation.dann,
            if self.ablation.use_generated { "on" } else { "off" },
            self.tgm.lambda1,
        )
    }

    /// Snapshot the resolved config next to the artifacts.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join("experiment.toml");
        let text = toml::to_string_pretty(self).context("serializing config")?;
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.out_dir.join("maps")
    }

    pub fn tgm_dir(&self) -> PathBuf {
        self.out_dir.join("tgm")
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.out_dir.join("generated")
    }

    pub fn sgm_checkpoint(&self) -> PathBuf {
        self.out_dir.join("sgm").join("sgm.ckpt")
    }

    pub fn index_path(&self) -> PathBuf {
        self.out_dir.join("index").join("db.stgl")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}
