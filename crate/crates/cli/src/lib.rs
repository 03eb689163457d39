//! Reproducible experiment commands built on `diffusion_sampling`.
//!
//! Each command reads an [`ExperimentConfig`], writes CSV files to the
//! output directory, and finishes with a `manifest-<command>.json` that
//! records the configuration hash, the seed and the crate version.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use diffusion_sampling::Error;

pub use commands::Command;
pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config error: {0}")]
    ConfigAt(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigAt(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_)
            | Error::Parse { .. }
            | Error::UnsupportedPenalty(_)
            | Error::RegimeMismatch { .. }
            | Error::BandEdgeTie { .. }
            | Error::ZeroDegree { .. }
            | Error::NotSymmetric { .. } => CliError::Config(e.to_string()),
            Error::Io(msg) => CliError::Io(std::io::Error::other(msg)),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

/// Settings shared by every command.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// TOML configuration text; empty means all defaults.
    pub config_text: String,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunOptions {
    /// Resolves the configuration: file, then `--set` overrides, then the
    /// dedicated `--seed` and `--out-dir` flags.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = ExperimentConfig::load(&self.config_text, &self.overrides)?;
        if let Some(seed) = self.seed {
            config.seed = Some(seed);
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.to_string_lossy().into_owned();
        }
        Ok(config)
    }
}

/// Runs `command` and returns the paths written, manifest last.
pub fn run(command: Command, options: &RunOptions) -> Result<Vec<PathBuf>, CliError> {
    let config = options.resolve()?;
    commands::execute(command, &config)
}
