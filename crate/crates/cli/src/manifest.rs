//! Run manifests: every command that writes artifacts lists them, with
//! checksums, in a `manifest.json` written last.

use std::path::Path;

use serde::{Deserialize, Serialize};

use flatscape::{fsutil, Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_checksum: Option<String>,
    pub tool_version: String,
    pub outputs: Vec<OutputEntry>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            schema_version: flatscape::SCHEMA_VERSION,
            command: command.to_string(),
            config,
            seed,
            model_checksum: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }

    /// Writes `bytes` to `dir/name` atomically and records it.
    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        fsutil::write_atomic(&dir.join(name), bytes)?;
        self.outputs.push(OutputEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: fsutil::sha256_hex(bytes),
        });
        Ok(())
    }

    /// Records an already-written file (e.g. a checkpoint).
    pub fn record_existing(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name))?;
        self.outputs.push(OutputEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: fsutil::sha256_hex(&bytes),
        });
        Ok(())
    }

    /// The manifest itself goes last so it only ever describes complete runs.
    pub fn finalize(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        fsutil::write_atomic(&dir.join(MANIFEST_NAME), &json)
    }
}

/// Checks every file a manifest lists; returns the number verified.
pub fn verify_manifest(dir: &Path) -> Result<usize> {
    let raw = std::fs::read(dir.join(MANIFEST_NAME))
        .map_err(|e| Error::Corrupt(format!("missing manifest: {e}")))?;
    let manifest: RunManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Corrupt(format!("unreadable manifest: {e}")))?;
    for out in &manifest.outputs {
        let path = dir.join(&out.path);
        let bytes = std::fs::read(&path)
            .map_err(|_| Error::Corrupt(format!("listed output {} is missing", out.path)))?;
        if bytes.len() as u64 != out.bytes || fsutil::sha256_hex(&bytes) != out.sha256 {
            return Err(Error::Corrupt(format!(
                "output {} does not match its manifest entry",
                out.path
            )));
        }
    }
    Ok(manifest.outputs.len())
}
