use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cutie_core::model::CutieConfig;
use cutie_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "CUTIE_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: cutie_core::tokenizer::DEFAULT_VOCAB_SIZE,
            min_count: 1,
        }
    }
}

/// Contents of a `--config` file. Every section and field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: CutieConfig,
    pub train: TrainConfig,
    pub vocab: VocabConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
