//! Run configuration (TOML, sectioned key-value) and the run manifest.
//!
//! Every field has a default; parsing materializes all of them, and the
//! manifest written next to a run is the fully resolved configuration plus
//! the package defaults (optimizer, activation, initialization). A
//! manifest alone therefore reproduces a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SideMap;
use crate::losses::{LossWeights, TripletReduction};
use crate::trainer::{TrainConfig, TripletRegime};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataConfig {
    /// synthetic Gaussian clusters
    Blobs {
        #[serde(default = "default_n_per_class")]
        n_per_class: usize,
        #[serde(default = "default_n_classes")]
        n_classes: usize,
        #[serde(default = "default_blob_dim")]
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// IDX image/label pair
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// optional label coarsening applied to build side information
        #[serde(default)]
        side_map: Option<SideMap>,
        /// optional cap on the number of rows (taken from the front)
        #[serde(default)]
        limit: Option<usize>,
        /// optional integrity checks, hex sha-256 of each file
        #[serde(default)]
        sha256_images: Option<String>,
        #[serde(default)]
        sha256_labels: Option<String>,
    },
    /// delimited text with a header row plus a column-role schema
    Csv {
        path: PathBuf,
        schema: PathBuf,
        /// optional integrity check, hex sha-256 of the data file
        #[serde(default)]
        sha256: Option<String>,
    },
}

fn default_n_per_class() -> usize {
    100
}
fn default_n_classes() -> usize {
    4
}
fn default_blob_dim() -> usize {
    2
}
fn default_spread() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub seed: u64,
    /// standardize features using training-split statistics (tabular)
    #[serde(default = "default_standardize")]
    pub standardize: bool,
}

fn default_train_fraction() -> f64 {
    0.8
}
fn default_split_seed() -> u64 {
    7
}
fn default_standardize() -> bool {
    true
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: default_train_fraction(),
            seed: default_split_seed(),
            standardize: default_standardize(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    /// defaults to the number of side classes when categorical, else 10
    #[serde(default)]
    pub n_score_classes: Option<usize>,
}

fn default_latent_dim() -> usize {
    8
}
fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: default_latent_dim(),
            hidden_layers: default_hidden(),
            n_score_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub triplet_regime: TripletRegime,
    #[serde(default)]
    pub triplets_per_batch: Option<usize>,
    #[serde(default)]
    pub triplet_reduction: TripletReduction,
}

fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            seed: 0,
            triplet_regime: TripletRegime::Off,
            triplets_per_batch: None,
            triplet_reduction: TripletReduction::Sum,
        }
    }
}

/// Optional semi-supervised section: reveal `n_labeled` training labels
/// (class-balanced, seed-deterministic) and weight their cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiConfig {
    pub n_labeled: usize,
    #[serde(default = "default_label_seed")]
    pub label_seed: u64,
    #[serde(default = "default_labeled_weight")]
    pub labeled_weight: f64,
}

fn default_label_seed() -> u64 {
    1
}
fn default_labeled_weight() -> f64 {
    1.0
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "LossWeights::default")]
    pub weights: LossWeights,
    #[serde(default)]
    pub semi: Option<SemiConfig>,
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "split.train_fraction must be in (0,1], got {}",
                self.split.train_fraction
            )));
        }
        Ok(())
    }

    /// The trainer view of this configuration.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.train.seed,
            weights: self.weights,
            triplet_regime: self.train.triplet_regime.clone(),
            triplets_per_batch: self.train.triplets_per_batch,
            triplet_reduction: self.train.triplet_reduction,
            labeled_weight: self.semi.as_ref().map(|s| s.labeled_weight),
        }
    }
}

/// Implementation defaults that are not user-configurable but belong in
/// the manifest for reproducibility.
#[derive(Debug, Clone, Serialize)]
pub struct PackageDefaults {
    pub optimizer: &'static str,
    pub activation: &'static str,
    pub weight_init: &'static str,
    pub variance_mapping: &'static str,
    pub latent_samples_per_step: usize,
    pub crate_version: &'static str,
}

impl Default for PackageDefaults {
    fn default() -> Self {
        Self {
            optimizer: "adam(beta1=0.9, beta2=0.999, eps=1e-8)",
            activation: "relu",
            weight_init: "gaussian(std = gain / sqrt(fan_in)), zero bias",
            variance_mapping: "softplus + 1e-8 floor",
            latent_samples_per_step: 1,
            crate_version: env!("CARGO_PKG_VERSION"),
        }
    }
}

/// Serialize the resolved config plus package defaults as the manifest.
pub fn manifest_toml(cfg: &RunConfig) -> Result<String> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        #[serde(flatten)]
        config: &'a RunConfig,
        defaults: PackageDefaults,
    }
    toml::to_string_pretty(&Manifest {
        config: cfg,
        defaults: PackageDefaults::default(),
    })
    .map_err(|e| ConfigError::Invalid(format!("manifest serialization: {e}")))
}
