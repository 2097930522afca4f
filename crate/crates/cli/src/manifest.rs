//! Run manifests: what was run, with which seed and resolved configuration.

use std::path::{Path, PathBuf};

use muser::config::{ModelConfig, RunConfig};
use muser::MuserError;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    /// Model configuration read from a checkpoint, when one was loaded; it
    /// takes precedence over `config.model`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_model: Option<ModelConfig>,
    pub outputs: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            argv: std::env::args().skip(1).collect(),
            seed,
            config,
            checkpoint_model: None,
            outputs: serde_json::Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> muser::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| MuserError::data(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| MuserError::io(path, e))
    }
}

/// `<out>.manifest.json` next to `out`.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}
