//! Run manifest: config hash, seeds, produced files and timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub files: Vec<FileEntry>,
    /// Wall-clock seconds of the last run of each command.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    /// Load the manifest in `dir`, or start a fresh one when it is missing or
    /// belongs to a different configuration.
    pub fn open(dir: &Path, config_hash: &str, seeds: &[u64]) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
            if m.config_hash == config_hash && m.seeds == seeds {
                return Ok(m);
            }
            log::info!("configuration changed; starting a new manifest in {}", dir.display());
        }
        Ok(Self {
            config_hash: config_hash.to_string(),
            seeds: seeds.to_vec(),
            ..Self::default()
        })
    }

    /// Add or refresh entries for `files` (absolute or relative to `dir`).
    pub fn record(&mut self, dir: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let full = if f.is_absolute() { f.clone() } else { dir.join(f) };
            let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
            let rel = full.strip_prefix(dir).unwrap_or(&full).to_path_buf();
            let entry = FileEntry {
                path: rel.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            };
            match self.files.iter_mut().find(|e| e.path == rel) {
                Some(e) => *e = entry,
                None => self.files.push(entry),
            }
        }
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Files listed but absent or changed on disk.
    pub fn verify(&self, dir: &Path) -> Vec<PathBuf> {
        self.files
            .iter()
            .filter(|e| match fs::read(dir.join(&e.path)) {
                Ok(b) => hex::encode(Sha256::digest(&b)) != e.sha256,
                Err(_) => true,
            })
            .map(|e| e.path.clone())
            .collect()
    }
}
