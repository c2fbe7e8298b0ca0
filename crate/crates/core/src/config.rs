//! Declarative run configuration (TOML).
//!
//! Every section has defaults, so an empty file is valid. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::eval::ProtocolConfig;
use crate::losses::{ContrastiveConfig, LossWeights};
use crate::network::ModelConfig;
use crate::sketch::XDoGParams;
use crate::trainer::{Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    #[default]
    Desk,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Overrides the preset's input size.
    pub input_height: Option<usize>,
    pub input_width: Option<usize>,
    pub sketch_attribute_input: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            input_height: None,
            input_width: None,
            sketch_attribute_input: true,
        }
    }
}

impl ModelSection {
    pub fn build(&self, attribute_count: usize) -> Result<ModelConfig> {
        let mut m = match self.preset {
            Preset::Full => ModelConfig::full(attribute_count),
            Preset::Desk => ModelConfig::desk(attribute_count),
            Preset::Tiny => ModelConfig::tiny(attribute_count),
        };
        if let Some(h) = self.input_height {
            m.input_height = h;
        }
        if let Some(w) = self.input_width {
            m.input_width = w;
        }
        m.sketch_attribute_input = self.sketch_attribute_input;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment_enabled: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            augment_enabled: t.augment_enabled,
        }
    }
}

/// Optional input locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub distractors: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core, 1 is the reproducibility mode.
    pub threads: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: AugmentConfig,
    pub contrastive: ContrastiveConfig,
    pub weights: LossWeights,
    pub xdog: XDoGParams,
    pub protocol: ProtocolConfig,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            model: ModelSection::default(),
            train: TrainSection::default(),
            augment: AugmentConfig::for_size(32, 32),
            contrastive: ContrastiveConfig::default(),
            weights: LossWeights::default(),
            xdog: XDoGParams::default(),
            protocol: ProtocolConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.xdog.validate()?;
        self.protocol.validate()?;
        self.train_config().validate()
    }

    /// Training settings for `model`. The augmentation crop always matches the
    /// model input size.
    pub fn train_config_for(&self, model: &ModelConfig) -> TrainConfig {
        let mut t = self.train_config();
        t.augment.crop_height = model.input_height;
        t.augment.crop_width = model.input_width;
        t
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: self.seed,
            weights: self.weights,
            contrastive: self.contrastive,
            augment: self.augment,
            augment_enabled: t.augment_enabled,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The thread count is
    /// excluded because results do not depend on it.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            threads: 0,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
