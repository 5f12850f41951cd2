use std::collections::BTreeMap;
use std::path::Path;

use ddl_core::{DdlError, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the output directory, sorted.
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: String,
    /// Seconds spent; kept here so the data outputs stay reproducible.
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config: config.resolved(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seed,
            version: ARTIFACT_VERSION.to_string(),
            wall_time_secs: 0.0,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn write(&mut self, dir: &Path) -> Result<()> {
        self.outputs.sort();
        self.outputs.dedup();
        let text = serde_json::to_string_pretty(self).map_err(|e| DdlError::Parse(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DdlError::Parse(e.to_string()))
    }
}
