//! Experiment configuration files.
//!
//! A config is TOML with one section per part of the experiment:
//! `[model]`, `[task]`, `[partition]`, `[aggregator]`, `[schedule]` and
//! `[training]`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::federation::FederatedConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parses and validates a config.
pub fn parse_config(text: &str) -> Result<FederatedConfig, ConfigError> {
    let config: FederatedConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<FederatedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

/// Hex SHA-256 of the config with defaults filled in, keys sorted and the
/// run seed zeroed. Key order, whitespace, comments and the seed never
/// change the hash.
pub fn config_hash(config: &FederatedConfig) -> String {
    let mut c = config.clone();
    c.training.seed = 0;
    let value = serde_json::to_value(&c).expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("json value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Bookkeeping written next to run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub started: String,
    pub finished: Option<String>,
}

impl RunManifest {
    pub fn start(config: &FederatedConfig, seeds: Vec<u64>, output_dir: &Path) -> Self {
        Self {
            config_hash: config_hash(config),
            seeds,
            output_dir: output_dir.display().to_string(),
            started: now(),
            finished: None,
        }
    }

    pub fn finish(&mut self) {
        self.finished = Some(now());
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
