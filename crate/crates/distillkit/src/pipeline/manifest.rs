//! Run manifests: every stage records what it read, what it wrote, and the
//! exact configuration fingerprint, so any artifact can be traced to its
//! inputs and any rerun can be checked for byte identity. Manifests carry
//! no timestamps; a rerun from identical inputs produces an identical
//! manifest (benchmark outputs, which embed wall-clock medians, are the
//! one documented exception).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::io::atomic_write;
use crate::error::{Error, Result};

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Precondition(format!("cannot hash {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// One input or output file, content-addressed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileStamp {
    /// Relative to the output root when the file lives under it.
    pub path: String,
    pub sha256: String,
}

/// Record of one stage execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub name: String,
    pub seed: u64,
    pub toolkit: String,
    pub config_sha256: String,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
    /// Free-form stage findings: drop counts, realized filter thresholds,
    /// stopping behaviour.
    pub notes: Vec<String>,
}

/// Toolkit identity embedded in every manifest.
pub fn toolkit_id() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Incrementally collects a manifest while a stage runs.
pub struct ManifestBuilder {
    out_root: PathBuf,
    manifest: Manifest,
}

impl ManifestBuilder {
    pub fn new(out_root: &Path, stage: &str, name: &str, seed: u64, config_sha256: &str) -> Self {
        ManifestBuilder {
            out_root: out_root.to_path_buf(),
            manifest: Manifest {
                stage: stage.to_string(),
                name: name.to_string(),
                seed,
                toolkit: toolkit_id(),
                config_sha256: config_sha256.to_string(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                notes: Vec::new(),
            },
        }
    }

    fn display_path(&self, path: &Path) -> String {
        path.strip_prefix(&self.out_root).unwrap_or(path).display().to_string()
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let stamp = FileStamp { path: self.display_path(path), sha256: sha256_file(path)? };
        self.manifest.inputs.push(stamp);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let stamp = FileStamp { path: self.display_path(path), sha256: sha256_file(path)? };
        self.manifest.outputs.push(stamp);
        Ok(())
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.manifest.notes.push(note.into());
    }

    /// Write the manifest (atomically) and return it.
    pub fn write(self, path: &Path) -> Result<Manifest> {
        let json = serde_json::to_string_pretty(&self.manifest)
            .expect("manifests always serialize");
        atomic_write(path, json.as_bytes())?;
        Ok(self.manifest)
    }
}

/// Read a previously written manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Precondition(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
