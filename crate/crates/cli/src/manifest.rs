//! Per-command provenance record written next to every output.

use std::path::{Path, PathBuf};

use anyhow::Result;
use mirror_align::io::{file_checksum, write_json};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration after defaults, file and flags.
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub status: Status,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: Status::Running,
            error: None,
        }
    }

    /// Records an input file and its checksum; fails if it cannot be read.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let checksum = file_checksum(path)?;
        self.inputs.push(FileRecord {
            path: path.to_path_buf(),
            checksum,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path, checksum: String) {
        self.outputs.push(FileRecord {
            path: path.to_path_buf(),
            checksum,
        });
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)?;
        Ok(())
    }
}
