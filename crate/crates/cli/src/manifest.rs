use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use protsi::config::TrainConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliResult;

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub episode: u64,
}

/// Record of one command invocation: what went in, what came out.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub command: String,
    /// Effective configuration in the config-file format.
    pub config: Option<String>,
    /// Input path -> sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub seeds: Option<Seeds>,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: Option<&TrainConfig>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: cfg.map(|c| c.to_string()),
            inputs: BTreeMap::new(),
            seeds: cfg.map(|c| Seeds {
                data: c.data_seed,
                model: c.model_seed,
                episode: c.episode_seed,
            }),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(protsi::Error::from)?;
        self.inputs.insert(path.display().to_string(), hex_digest(&bytes));
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(protsi::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(protsi::Error::from)?;
        Ok(path)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
