//! Per-run manifest recording config, code version, timing and artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use imfuse::config::RunConfig;
use imfuse::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Manifest file name for a command; commands sharing a run directory keep
/// separate manifests.
pub fn manifest_file(command: &str) -> String {
    format!("{command}.manifest.json")
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Git-style content hash: SHA-256 over `blob <len>\0<content>`.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub code_version: String,
    pub code_hash: String,
    pub started: u64,
    pub finished: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn begin(command: &str, config: &RunConfig) -> Self {
        let version = code_version();
        Self {
            command: command.to_string(),
            config: config.clone(),
            code_hash: content_hash(&version),
            code_version: version,
            started: unix_now(),
            finished: 0,
            artifacts: Vec::new(),
        }
    }

    pub fn add(&mut self, artifact: impl Into<PathBuf>) {
        self.artifacts.push(artifact.into());
    }

    /// Checks every artifact exists, stamps the end time and writes the
    /// manifest through a temporary file and a rename.
    pub fn finish(mut self, run_dir: &Path) -> Result<PathBuf> {
        for a in &self.artifacts {
            let p = run_dir.join(a);
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "artifact missing at run end")));
            }
        }
        self.finished = unix_now();
        let name = manifest_file(&self.command);
        let path = run_dir.join(&name);
        let tmp = run_dir.join(format!("{name}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&self).expect("manifest serializes")).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest { path: path.to_path_buf(), source: e })
    }
}
