use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cecomp::compressor::{CompressionConfig, LoraConfig};
use cecomp::distill::TrainConfig;
use cecomp::tinylm::ModelConfig;
use serde::{Deserialize, Serialize};

/// Experiment configuration read from TOML. Every field has a default and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Seed of the frozen base model's initialisation.
    pub model_seed: u64,
    /// Seed of the compressor's LoRA initialisation.
    pub compressor_seed: u64,
    pub compression: CompressionConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            model_seed: 0,
            compressor_seed: 1,
            compression: CompressionConfig::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            cache_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.compression.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("model_seed = 7\n[train]\nlearning_rate = 0.001\n").unwrap();
        assert_eq!(cfg.model_seed, 7);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.model, ModelConfig::tiny());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 1.0\n").is_err());
    }

    #[test]
    fn default_round_trips() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
    }
}
