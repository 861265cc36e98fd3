//! Run manifests: what a run produced, as content-addressed artifacts, plus
//! stage bookkeeping so an aborted pipeline leaves a readable trail. One run
//! owns its output directory through a lock file for its whole lifetime.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use flowlab::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const LOCK_NAME: &str = ".flowlab.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Logical name, unique within the manifest.
    pub name: String,
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// `completed` or `failed`.
    pub status: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Unix seconds at creation. Reruns differ here and nowhere else.
    pub created_unix: u64,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            tool: "flowlab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seed,
            created_unix,
            stages: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Hashes the file at `out_dir/path` and records it, replacing an entry
    /// of the same name. The file must already exist.
    pub fn record_artifact(&mut self, out_dir: &Path, name: &str, path: &str) -> Result<()> {
        let full = out_dir.join(path);
        let (sha256, bytes) = sha256_file(&full)?;
        let record =
            ArtifactRecord { name: name.into(), path: path.into(), sha256, bytes };
        match self.artifacts.iter_mut().find(|a| a.name == name) {
            Some(slot) => *slot = record,
            None => self.artifacts.push(record),
        }
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn stage_completed(&mut self, name: &str, detail: impl Into<String>) {
        self.set_stage(name, "completed", detail.into());
    }

    pub fn stage_failed(&mut self, name: &str, detail: impl Into<String>) {
        self.set_stage(name, "failed", detail.into());
    }

    fn set_stage(&mut self, name: &str, status: &str, detail: String) {
        let record =
            StageRecord { name: name.into(), status: status.into(), detail };
        match self.stages.iter_mut().find(|s| s.name == name) {
            Some(slot) => *slot = record,
            None => self.stages.push(record),
        }
    }

    /// Every recorded artifact exists under `out_dir` and matches its hash.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let full = out_dir.join(&a.path);
            let (sha256, bytes) = sha256_file(&full).map_err(|_| Error::Format {
                path: full.display().to_string(),
                detail: format!("artifact {:?} is missing", a.name),
            })?;
            if sha256 != a.sha256 || bytes != a.bytes {
                return Err(Error::Format {
                    path: full.display().to_string(),
                    detail: format!(
                        "artifact {:?} does not match its manifest hash",
                        a.name
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let text = flowlab::metrics::to_json_pretty(self)?;
        fs::write(out_dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("manifest rejected: {e}"),
        })
    }
}

/// SHA-256 and size of a file, streamed.
pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok((hex(&hasher.finalize()), bytes))
}

/// Exclusive ownership of an output directory. Creating the lock fails if
/// another live run holds it; a crash leaves the lock behind, and the error
/// message says where it is so the operator can remove it.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::invalid(format!(
                    "output directory {} is locked by another run; remove {} if that run is dead",
                    out_dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
