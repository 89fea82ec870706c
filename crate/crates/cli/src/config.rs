//! Experiment configuration and its JSON schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use skam::mosaic::MosaicConfig;
use skam::tasks::TaskSpec;
use thiserror::Error;

/// Published schema for experiment files.
pub const EXPERIMENT_SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("config violates the schema:\n{0}")]
    Schema(String),
    #[error("inconsistent config: {0}")]
    Invalid(String),
}

fn default_eval_samples() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub iters: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_multipliers: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Held-out samples per evaluation multiplier.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Defaults to `eval_every`.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Wall-clock times make metrics files differ between runs, so they are
    /// opt-in.
    #[serde(default)]
    pub record_wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: MosaicConfig,
    pub task: TaskSpec,
    pub training: TrainingConfig,
    pub output_dir: PathBuf,
}

fn schema_errors(instance: &Value) -> Option<String> {
    let schema: Value = serde_json::from_str(EXPERIMENT_SCHEMA).expect("embedded schema is valid JSON");
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("embedded schema compiles");
    let result = compiled.validate(instance);
    match result {
        Ok(()) => None,
        Err(errors) => Some(
            errors
                .map(|e| format!("  {}: {}", e.instance_path, e))
                .collect::<Vec<_>>()
                .join("\n"),
        ),
    }
}

impl ExperimentConfig {
    /// Validates `text` against the schema, then parses and cross-checks it.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
        if let Some(msg) = schema_errors(&value) {
            return Err(ConfigError::Schema(msg));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| ConfigError::Json(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn check(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let seq = self
            .task
            .sequence_len()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if seq != self.model.seq_len {
            return bad(format!(
                "model.seq_len is {} but the task produces sequences of length {seq}",
                self.model.seq_len
            ));
        }
        if self.task.kind.vocab() != self.model.vocab {
            return bad(format!(
                "model.vocab is {} but the task vocabulary has {} tokens",
                self.model.vocab,
                self.task.kind.vocab()
            ));
        }
        for &m in &self.training.eval_multipliers {
            self.task
                .with_multiplier(m)
                .content_len()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let mut seeds = self.training.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.training.seeds.len() {
            return bad("training.seeds contains duplicates".into());
        }
        Ok(())
    }
}
