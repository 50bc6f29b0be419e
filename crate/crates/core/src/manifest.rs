//! Run manifests: what a command was asked to do and with which inputs,
//! enough to repeat it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::denoiser::{weights_hash, DenoiserParams};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A weight file a run read or wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl WeightRef {
    pub fn of(path: &Path, params: &DenoiserParams) -> Result<Self> {
        Ok(WeightRef {
            path: path.to_path_buf(),
            sha256: weights_hash(params)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// The full configuration the command ran with, after defaults and
    /// command-line overrides.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub schedule_hash: Option<String>,
    pub weights: BTreeMap<String, WeightRef>,
    pub deterministic: bool,
    pub threads: usize,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: BTreeMap::new(),
            schedule_hash: None,
            weights: BTreeMap::new(),
            deterministic: true,
            threads: 1,
            started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_s: 0.0,
        }
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::pipeline::write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// True when a JSON document looks like a manifest rather than a plain
    /// command config.
    pub fn is_manifest(doc: &serde_json::Value) -> bool {
        doc.get("command").is_some() && doc.get("tool_version").is_some()
    }
}
