use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

/// Provenance of one command run. Contains no timestamps, so identical runs
/// produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub config: String,
    pub outputs: Vec<OutputEntry>,
    /// Sanity-check findings worth a second look.
    pub notes: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_sha256: config.sha256(),
            config: config.canonical_toml(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path, contents: &[u8]) {
        let file = path
            .file_name()
            .map_or_else(String::new, |f| f.to_string_lossy().into_owned());
        self.outputs.push(OutputEntry {
            file,
            sha256: sha256_hex(contents),
        });
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest is serializable");
        s.push('\n');
        s
    }
}
