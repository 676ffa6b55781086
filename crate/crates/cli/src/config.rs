//! Flat run configuration: a TOML file of scalar keys, overridable by
//! command-line flags. Unknown keys are rejected, and the effective
//! configuration is echoed into every report for provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

/// Every key a config file may set. All optional; flags win over the file.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub router: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub proj: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub schedule: Option<String>,
    pub mode: Option<String>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub qtypes: Option<String>,
    pub strategy: Option<String>,
    // Generator knobs.
    pub dim: Option<usize>,
    pub clusters: Option<usize>,
    pub spread: Option<f64>,
    pub compose_tasks: Option<usize>,
    pub aggregation_tasks: Option<usize>,
    pub anchoring: Option<f64>,
    pub distractors: Option<usize>,
    // Training hyperparameters.
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub tau: Option<f64>,
    pub hard_negatives: Option<usize>,
    pub weight_decay: Option<f64>,
    pub hidden: Option<usize>,
    pub use_mix: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// Ordered key=value map echoed into CSV headers and JSON summaries.
#[derive(Debug, Default, Clone)]
pub struct Echo(pub BTreeMap<String, String>);

impl Echo {
    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn put_path(&mut self, key: &str, value: &Path) {
        self.0.insert(key.to_string(), value.display().to_string());
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.0
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::to_value(&self.0).expect("string map serializes")
    }
}

/// flag | config-file | default resolution.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// flag | config-file resolution for required values.
pub fn pick_required<T: Clone>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file).ok_or_else(|| anyhow::anyhow!("missing required option --{name}"))
}
