//! Experiment configuration (TOML) and the run manifest written next to outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use embedheight::nets::{NetworkSpec, Variant};
use embedheight::trainer::{TrainConfig, DEFAULT_MARGIN};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unet,
    Unetpp,
    Ridge,
}

impl ModelKind {
    pub fn network_variant(self) -> Option<Variant> {
        match self {
            ModelKind::Unet => Some(Variant::Unet),
            ModelKind::Unetpp => Some(Variant::UnetPlusPlus),
            ModelKind::Ridge => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsm: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// First test column; defaults to 70% of the width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_column: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: ModelKind,
    pub depth: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = NetworkSpec::default();
        ModelSection {
            variant: ModelKind::Unetpp,
            depth: d.depth,
            base_channels: d.base_channels,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub max_epochs: u64,
    pub plateau_factor: f64,
    pub plateau_patience: u64,
    pub stop_patience: u64,
    pub split_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            patch_size: t.patch_size,
            max_epochs: t.max_epochs,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            stop_patience: t.stop_patience,
            split_seed: t.split_seed,
            shuffle_seed: t.shuffle_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgeSection {
    pub lambda: f64,
    pub subsample: usize,
    pub subsample_seed: u64,
}

impl Default for RidgeSection {
    fn default() -> Self {
        RidgeSection {
            lambda: embedheight::ridge::DEFAULT_LAMBDA,
            subsample: embedheight::ridge::DEFAULT_SUBSAMPLE,
            subsample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// Tile size; defaults to the training patch size, widened to at least four margins.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    pub margin: usize,
    pub batch_size: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            patch_size: None,
            margin: DEFAULT_MARGIN,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ridge: RidgeSection,
    pub infer: InferSection,
}

pub const MANIFEST_FILE: &str = "run_manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versions {
    pub embedheight: String,
    pub cli: String,
    pub egrid: u16,
    pub checkpoint: u16,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            embedheight: embedheight::VERSION.to_string(),
            cli: env!("CARGO_PKG_VERSION").to_string(),
            egrid: embedheight::grid::EGRID_VERSION,
            checkpoint: embedheight::nets::CHECKPOINT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub split: u64,
    pub shuffle: u64,
    pub ridge_subsample: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written to every run directory; `--config` accepts it in place of a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub versions: Versions,
    pub inputs: Vec<InputDigest>,
    pub config: RunConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        if value.contains_key("manifest_version") {
            let m: RunManifest = toml::from_str(text).context("invalid run manifest")?;
            if m.manifest_version != MANIFEST_VERSION {
                bail!("unsupported manifest version {}", m.manifest_version);
            }
            return Ok(m.config);
        }
        toml::from_str(text).context("invalid config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        embedheight::ingest::sha256_bytes(self.to_toml().as_bytes())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            patch_size: t.patch_size,
            max_epochs: t.max_epochs,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            stop_patience: t.stop_patience,
            split_seed: t.split_seed,
            shuffle_seed: t.shuffle_seed,
        }
    }

    pub fn network_spec(&self) -> Option<NetworkSpec> {
        self.model.variant.network_variant().map(|variant| NetworkSpec {
            variant,
            depth: self.model.depth,
            base_channels: self.model.base_channels,
            seed: self.model.seed,
            ..NetworkSpec::default()
        })
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            model: self.model.seed,
            split: self.train.split_seed,
            shuffle: self.train.shuffle_seed,
            ridge_subsample: self.ridge.subsample_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if let Some(spec) = self.network_spec() {
            spec.validate()?;
            if self.train.patch_size % spec.size_multiple() != 0 {
                bail!(
                    "patch_size {} must be a multiple of {} for depth {}",
                    self.train.patch_size,
                    spec.size_multiple(),
                    spec.depth
                );
            }
        }
        if !(self.ridge.lambda >= 0.0 && self.ridge.lambda.is_finite()) {
            bail!("ridge lambda must be >= 0");
        }
        if self.infer.batch_size == 0 {
            bail!("infer batch_size must be >= 1");
        }
        Ok(())
    }
}
