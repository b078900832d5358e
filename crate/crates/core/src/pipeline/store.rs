//! Stage bookkeeping: content hashes, completion records and the
//! output-directory lock.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Written after a stage succeeds; a matching hash with all outputs present
/// lets a rerun skip the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub hash: String,
    /// Upstream stage ids.
    pub inputs: Vec<String>,
    /// Artifacts, relative to the output directory.
    pub outputs: Vec<String>,
}

/// Hash of a stage id, its config subsection and its upstream hashes.
pub fn stage_hash<S: Serialize>(stage: &str, config: &S, upstream: &[&str]) -> Result<String> {
    let json = serde_json::to_string(config).map_err(|e| Error::Config(format!("hashing {stage}: {e}")))?;
    let mut h = Sha256::new();
    for part in [stage, json.as_str()].into_iter().chain(upstream.iter().copied()) {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Hex SHA-256 of raw bytes.
pub fn bytes_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path for a new artifact, with its parent directory created.
    pub fn output(&self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(path)
    }

    fn record_path(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }

    pub fn record(&self, stage: &str) -> Option<StageRecord> {
        let text = fs::read_to_string(self.record_path(stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// True when the stage completed with this hash and its outputs exist.
    pub fn is_current(&self, stage: &str, hash: &str) -> bool {
        self.record(stage)
            .is_some_and(|r| r.hash == hash && r.outputs.iter().all(|o| self.path(o).exists()))
    }

    pub fn commit(&self, rec: &StageRecord) -> Result<()> {
        let path = self.record_path(&rec.stage);
        let json = serde_json::to_string_pretty(rec).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&path, json.as_bytes())
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.path(rel), bytes)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".lowdose.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Precondition(format!(
                "{} exists: another pipeline is running in this directory (remove the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
