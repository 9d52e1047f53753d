//! Merged run configuration: a JSON file validated against a strict schema,
//! overridden field-by-field by CLI flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use memseg::data::GenConfig;
use memseg::model::ModelConfig;
use memseg::pipeline::InferenceConfig;
use memseg::train::{AugmentationConfig, TrainConfig};

/// Everything a run can configure. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub gen: Option<GenConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub augment: Option<AugmentationConfig>,
    pub infer: Option<InferenceConfig>,
}

impl RunConfig {
    /// Parse and schema-validate a config file before any work happens.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_slice(&bytes)
            .with_context(|| format!("config {} failed schema validation", path.display()))?;
        Ok(config)
    }
}
