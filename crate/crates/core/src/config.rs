use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::DecodeConfig;
use crate::error::Result;
use crate::index::QuantizerConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Everything a run reads from `--config`. Joint-training fields sit at the
/// top level; the other sections are nested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Overrides for contrastive pretraining; unset fields take the defaults.
    pub pretrain: TrainConfig,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
    /// Train a coarse quantizer when building the index.
    pub quantizer: Option<QuantizerConfig>,
    /// Vocabulary size cap, reserved tokens included.
    pub vocab_size: usize,
    pub min_freq: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            pretrain: TrainConfig::default(),
            model: ModelConfig::default(),
            decode: DecodeConfig::default(),
            quantizer: None,
            vocab_size: 30_000,
            min_freq: 1,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
