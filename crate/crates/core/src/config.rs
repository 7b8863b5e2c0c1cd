//! Run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{DEFAULT_K, DEFAULT_VARIANCE_TARGET};
use crate::heatmap::RefinerTrainConfig;
use crate::learn::{AdamConfig, LossKind, TrainConfig, DEFAULT_HIDDEN};
use crate::pyramid::{SlideSpec, DEFAULT_TILE_SIZE};
use crate::sampler::{AugmentSpec, BatchSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workdir: Option<PathBuf>,
    /// Defaults to `manifest.json` inside the workdir.
    pub manifest: Option<PathBuf>,
    pub patch_size: u32,
    pub level: usize,
    /// Multiplies the per-epoch batch counts; below 1 for quick runs.
    pub scale: f64,
    pub workers: usize,
    pub synthetic: SyntheticConfig,
    pub sampler: SamplerConfig,
    pub cluster: ClusterConfig,
    pub train: TrainSection,
    pub refine: RefineSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workdir: None,
            manifest: None,
            patch_size: 256,
            level: 0,
            scale: 1.0,
            workers: 8,
            synthetic: SyntheticConfig::default(),
            sampler: SamplerConfig::default(),
            cluster: ClusterConfig::default(),
            train: TrainSection::default(),
            refine: RefineSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub tissue_blobs: usize,
    pub tumour_blobs: usize,
    pub tile_size: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 2048,
            height: 2048,
            tissue_blobs: 3,
            tumour_blobs: 2,
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self) -> SlideSpec {
        SlideSpec {
            width: self.width,
            height: self.height,
            tissue_blobs: self.tissue_blobs,
            tumour_blobs: self.tumour_blobs,
            tile_size: self.tile_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub train_batches: usize,
    pub val_batches: usize,
    pub queue_capacity: usize,
    pub augment: AugmentSpec,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            train_batches: 500,
            val_batches: 200,
            queue_capacity: 20,
            augment: AugmentSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub variance_target: f64,
    pub k: usize,
    /// Batches drawn from the training split to fit on.
    pub batches: usize,
    pub batch_size: usize,
    /// Directory of `<slide_id>.hfv` files replacing the built-in descriptor.
    pub external_features: Option<PathBuf>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            variance_target: DEFAULT_VARIANCE_TARGET,
            k: DEFAULT_K,
            batches: 100,
            batch_size: 32,
            external_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub accumulation: usize,
    pub patience: usize,
    pub hidden: usize,
    pub loss: LossKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 100,
            accumulation: 1,
            patience: 0,
            hidden: DEFAULT_HIDDEN,
            loss: LossKind::Cwce,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig::with_lr(self.lr),
            epochs: self.epochs,
            accumulation_steps: self.accumulation,
            patience: self.patience,
            loss: self.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub radius: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub samples_per_class: usize,
    pub validation_fraction: f64,
    /// Program and arguments of an external refiner; replaces the built-in one.
    pub executor: Option<Vec<String>>,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefinerTrainConfig::default();
        Self {
            radius: d.radius,
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            accumulation: d.accumulation_steps,
            samples_per_class: d.samples_per_class,
            validation_fraction: d.validation_fraction,
            executor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f32,
    pub bench_repetitions: usize,
    /// Slide for `bench`; the first test slide when unset.
    pub bench_slide: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            bench_repetitions: 10,
            bench_slide: None,
        }
    }
}

/// A rejected field and why.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config field `{}`: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn bad(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(".", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch_size < 8 {
            return Err(bad("patch_size", "must be at least 8"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(bad("scale", "must be positive"));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be at least 1"));
        }
        if self.sampler.batch_size == 0 {
            return Err(bad("sampler.batch_size", "must be at least 1"));
        }
        if self.sampler.queue_capacity == 0 {
            return Err(bad("sampler.queue_capacity", "must be at least 1"));
        }
        if !(self.cluster.variance_target > 0.0 && self.cluster.variance_target <= 1.0) {
            return Err(bad("cluster.variance_target", "must lie in (0, 1]"));
        }
        if self.cluster.k < 2 {
            return Err(bad("cluster.k", "must be at least 2"));
        }
        if self.cluster.batches == 0 || self.cluster.batch_size == 0 {
            return Err(bad("cluster.batches", "batches and batch_size must be positive"));
        }
        if !(self.train.lr > 0.0) {
            return Err(bad("train.lr", "must be positive"));
        }
        if self.train.accumulation == 0 {
            return Err(bad("train.accumulation", "must be at least 1"));
        }
        if self.train.hidden == 0 {
            return Err(bad("train.hidden", "must be at least 1"));
        }
        if self.train.loss == LossKind::CwceUnnormalized {
            return Err(bad("train.loss", "must be ce or cwce"));
        }
        if !(self.refine.lr > 0.0) {
            return Err(bad("refine.lr", "must be positive"));
        }
        if self.refine.batch_size == 0 || self.refine.accumulation == 0 || self.refine.samples_per_class == 0 {
            return Err(bad("refine", "batch_size, accumulation and samples_per_class must be positive"));
        }
        if !(0.0..1.0).contains(&self.refine.validation_fraction) {
            return Err(bad("refine.validation_fraction", "must lie in [0, 1)"));
        }
        if matches!(&self.refine.executor, Some(cmd) if cmd.is_empty()) {
            return Err(bad("refine.executor", "needs a program"));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(bad("eval.threshold", "must lie in (0, 1)"));
        }
        if self.eval.bench_repetitions == 0 {
            return Err(bad("eval.bench_repetitions", "must be at least 1"));
        }
        Ok(())
    }

    /// Canonical JSON of the effective settings.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hex SHA-256 of the effective config, excluding the workdir location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workdir = None;
        hex::encode(Sha256::digest(c.to_json().as_bytes()))
    }

    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.scale).round() as usize).max(1)
    }

    pub fn batch_spec(&self, train: bool, seed: u64) -> BatchSpec {
        BatchSpec {
            batch_size: self.sampler.batch_size,
            train_batches: self.scaled(self.sampler.train_batches),
            val_batches: self.scaled(self.sampler.val_batches),
            workers: self.workers,
            queue_capacity: self.sampler.queue_capacity,
            augment: if train { self.sampler.augment.clone() } else { AugmentSpec::none() },
            seed,
            keep_pixels: false,
        }
    }

    pub fn refiner_config(&self) -> RefinerTrainConfig {
        RefinerTrainConfig {
            radius: self.refine.radius,
            lr: self.refine.lr,
            epochs: self.refine.epochs,
            batch_size: self.refine.batch_size,
            accumulation_steps: self.refine.accumulation,
            samples_per_class: self.refine.samples_per_class,
            validation_fraction: self.refine.validation_fraction,
            seed: self.seed,
        }
    }
}
