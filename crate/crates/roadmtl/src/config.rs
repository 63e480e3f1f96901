//! Run configuration: one TOML file with sections mirroring the typed
//! configs of each module. Unknown keys are rejected, and parse → serialize
//! round-trips byte-identically for files produced by this module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::DiscriminatorConfig;
use crate::backbone::BackboneConfig;
use crate::data::preprocess::PhotometricConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Horizontal-flip probability (flipping a target sample negates its
    /// angle).
    pub flip_p: f64,
    pub photometric: PhotometricConfig,
    /// Source scale-jitter range applied before the random crop; absent
    /// (the default) disables jitter.
    pub scale_jitter: Option<(f64, f64)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_p: 0.5, photometric: PhotometricConfig::default(), scale_jitter: None }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { flip_p: 0.0, photometric: PhotometricConfig::disabled(), scale_jitter: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest paths, absolute or relative to the data root.
    pub source_train: PathBuf,
    pub target_train: PathBuf,
    pub target_val: PathBuf,
    pub target_test: PathBuf,
    /// Label ids merged into the binary road class during preprocessing.
    pub drivable_class_ids: Vec<i32>,
    /// Size source batches are cropped to during training.
    pub source_resolution: (usize, usize),
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_train: "source/train.tsv".into(),
            target_train: "target/train.tsv".into(),
            target_val: "target/val.tsv".into(),
            target_test: "target/test.tsv".into(),
            drivable_class_ids: vec![13, 14, 15, 17, 23, 24, 41, 43],
            source_resolution: (768, 1024),
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub source_batch: usize,
    pub target_batch: usize,
    pub sgd_lr: f64,
    pub nesterov_momentum: f64,
    pub weight_decay: f64,
    /// Validate (and checkpoint) every this many steps; must divide
    /// total_steps.
    pub val_every: u64,
    pub seed: u64,
    pub deterministic: bool,
    pub checkpoint_dir: PathBuf,
    /// Polynomial learning-rate decay exponent; `None` keeps the rate
    /// constant.
    pub poly_decay_power: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            source_batch: 16,
            target_batch: 32,
            sgd_lr: 2.5e-4,
            nesterov_momentum: 0.9,
            weight_decay: 5e-4,
            val_every: 1000,
            seed: 0,
            deterministic: true,
            checkpoint_dir: "checkpoints".into(),
            poly_decay_power: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_batch == 0 || self.target_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        if self.total_steps % self.val_every != 0 {
            return Err(Error::Config(format!(
                "val_every {} must divide total_steps {}",
                self.val_every, self.total_steps
            )));
        }
        if !(self.sgd_lr > 0.0) {
            return Err(Error::Config("sgd_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.nesterov_momentum) {
            return Err(Error::Config("nesterov_momentum must lie in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(p) = self.poly_decay_power {
            if !(p > 0.0) {
                return Err(Error::Config("poly_decay_power must be positive".into()));
            }
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit TOML integer".into()));
        }
        Ok(())
    }

    /// Learning rate at a (1-based) step: constant, or polynomial decay
    /// `lr·(1 − (step−1)/total)^power` when enabled.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.poly_decay_power {
            None => self.sgd_lr,
            Some(power) => {
                let progress = (step.saturating_sub(1)) as f64 / self.total_steps as f64;
                self.sgd_lr * (1.0 - progress).max(0.0).powf(power)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub data: DataConfig,
    pub loss_weights: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.model.validate()?;
        self.discriminator.validate()?;
        self.loss_weights.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())
            .map_err(|e| Error::io(format!("writing config {}", path.display()), e))
    }
}
