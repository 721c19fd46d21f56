//! Per-directory record of what produced a set of outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST_FORMAT: &str = "analogy-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    /// Subcommand that wrote the directory.
    pub command: String,
    /// Fully resolved configuration; enough to repeat the run.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// Files written, relative to the directory.
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub status: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            format: RUN_MANIFEST_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
            status: "completed".into(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::json("run manifest", e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if m.format != RUN_MANIFEST_FORMAT {
            return Err(Error::validation(
                &path,
                format!("unknown format {:?}", m.format),
            ));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
