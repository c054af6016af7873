use std::path::{Path, PathBuf};

use comp_attn::model::ModelConfig;
use comp_attn::task::TaskConfig;
use comp_attn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable that overrides every output directory.
pub const OUTPUT_ENV: &str = "COMP_ATTN_OUT";

/// One experiment: a task, a model, a training schedule over several
/// seeds, and where to put the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Defaults to `runs/<name>`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// How many fresh batches the post-training value-score analysis draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_analysis_batches")]
    pub batches: usize,
    #[serde(default = "default_analysis_batch_size")]
    pub batch_size: usize,
}

fn default_analysis_batches() -> usize {
    8
}

fn default_analysis_batch_size() -> usize {
    256
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            batches: default_analysis_batches(),
            batch_size: default_analysis_batch_size(),
        }
    }
}

impl ExperimentConfig {
    /// Strict JSON parse followed by validation.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, e: comp_attn::Error| CliError::Config(format!("{field}: {e}"));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
        {
            return Err(CliError::Config(format!(
                "name: `{}` must be non-empty and use only letters, digits, `_`, `-` or `.`",
                self.name
            )));
        }
        self.task.validate().map_err(|e| bad("task", e))?;
        self.model.validate().map_err(|e| bad("model", e))?;
        self.train.validate().map_err(|e| bad("train", e))?;
        if self.analysis.batches == 0 || self.analysis.batch_size == 0 {
            return Err(CliError::Config(
                "analysis: batches and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Output directory: `$COMP_ATTN_OUT/<name>` when the variable is set,
    /// else the configured directory, else `runs/<name>`.
    pub fn output_dir(&self, env_override: Option<&Path>) -> PathBuf {
        match (env_override, &self.output_dir) {
            (Some(root), _) => root.join(&self.name),
            (None, Some(dir)) => dir.clone(),
            (None, None) => PathBuf::from("runs").join(&self.name),
        }
    }

    /// Canonical serialization: the resolved config with defaults filled
    /// in, as compact JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Git-style content hash: SHA-256 over `"blob <len>\0"` followed by
    /// the canonical JSON.
    pub fn content_hash(&self) -> String {
        let body = self.canonical_json();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
