use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::AugmentConfig;
use super::optim::AdamParams;
use crate::error::{Error, Result};
use crate::masking::{check_ratio, DEFAULT_MASKING_RATIO};
use crate::model::{Family, HeadKind, ModelConfig};
use crate::types::ClipSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Stage::Pretrain => 100,
            Stage::Finetune => 70,
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            Stage::Pretrain => HeadKind::Reconstruction,
            Stage::Finetune => HeadKind::Segmentation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    /// Stage widths; the family default when absent.
    pub channels: Option<Vec<usize>>,
    pub residual_units: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            family: Family::Volumetric,
            channels: None,
            residual_units: None,
            init_seed: 0,
        }
    }
}

/// Everything a training run reads, loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Defaults to 100 for pretraining and 70 for fine-tuning.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_period")]
    pub period: usize,
    /// Pretraining only; defaults to 0.6 there.
    #[serde(default)]
    pub masking_ratio: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Zero wall-clock fields so reruns produce identical artifacts.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub optimizer: AdamParams,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub model: ModelSection,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_wd() -> f64 {
    1e-5
}
fn default_batch() -> usize {
    4
}
fn default_frames() -> usize {
    32
}
fn default_period() -> usize {
    1
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            epochs: None,
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            frames: default_frames(),
            period: default_period(),
            masking_ratio: None,
            seed: 0,
            deterministic: false,
            optimizer: AdamParams::default(),
            augment: AugmentConfig::default(),
            model: ModelSection::default(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(self.stage.default_epochs())
    }

    pub fn masking_ratio(&self) -> f64 {
        self.masking_ratio.unwrap_or(DEFAULT_MASKING_RATIO)
    }

    pub fn clip_spec(&self) -> Result<ClipSpec> {
        ClipSpec::new(self.frames, self.period)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs() == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be a positive number"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        match (self.stage, self.masking_ratio) {
            (Stage::Finetune, Some(_)) => {
                return Err(Error::config("masking_ratio", "only applies to the pretrain stage"));
            }
            (Stage::Pretrain, Some(r)) => {
                check_ratio(r).map_err(|e| Error::config("masking_ratio", e.to_string()))?;
            }
            _ => {}
        }
        self.clip_spec().map_err(|e| Error::config("frames", e.to_string()))?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        format!("{:x}", Sha256::digest(json))
    }

    /// Network configuration for frames of `height x width`.
    pub fn model_config(&self, height: usize, width: usize) -> ModelConfig {
        let base = match self.model.family {
            Family::Volumetric => ModelConfig::volumetric(height, width, self.frames),
            Family::SuperImage => ModelConfig::super_image(height, width, self.frames),
        };
        ModelConfig {
            encoder_channels: self.model.channels.clone().unwrap_or(base.encoder_channels.clone()),
            residual_units_per_stage: self.model.residual_units.unwrap_or(base.residual_units_per_stage),
            init_seed: self.model.init_seed,
            head: self.stage.head(),
            ..base
        }
    }
}
