//! Run manifests: what was run, with which inputs, and what it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mtl_core::config::{RunConfig, KEYS};
use mtl_core::io::{file_hash, write_atomic};

use crate::Command;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    /// Git-style blob hash of the contents.
    pub hash: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileRecord {
            path: path.to_path_buf(),
            hash: file_hash(path).with_context(|| format!("hashing {}", path.display()))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Command,
    /// Every resolved config key, empty for gen-data.
    pub config: BTreeMap<String, String>,
    pub threads: usize,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: BTreeMap<String, FileRecord>,
    pub wall_clock_s: BTreeMap<String, f64>,
    pub summary: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: Command, cfg: Option<&RunConfig>, threads: usize) -> Self {
        let mut m = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config: BTreeMap::new(),
            threads,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_clock_s: BTreeMap::new(),
            summary: BTreeMap::new(),
        };
        if let Some(c) = cfg {
            m.set_config(c);
        }
        m
    }

    pub fn set_config(&mut self, cfg: &RunConfig) {
        self.config = KEYS
            .iter()
            .map(|k| (k.to_string(), cfg.get(k).expect("listed keys resolve")))
            .collect();
    }

    /// The resolved config as parseable `key = value` text, profile first.
    pub fn config_text(&self) -> String {
        let mut s = String::new();
        if let Some(p) = self.config.get("profile") {
            s += &format!("profile = {p}\n");
        }
        for (k, v) in &self.config {
            if k != "profile" {
                s += &format!("{k} = {v}\n");
            }
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
