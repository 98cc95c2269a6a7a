//! Run manifests: config snapshot, seed, tool version, input hashes, output
//! paths and per-stage wall-clock, written atomically at run end.
//!
//! (inputs, seed, config) fully determine a command's data outputs; the
//! manifest records what those were. Timings vary run to run, so the
//! manifest itself is a log, not part of the reproducible output set.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.input_hashes.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn record_timing(&mut self, stage: &str, since: Instant) {
        self.timings_s
            .insert(stage.to_string(), since.elapsed().as_secs_f64());
    }

    /// Atomic write (temp file + rename) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_NAME);
        let tmp = dir.join(format!("{RUN_MANIFEST_NAME}.tmp"));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("manifest encode: {e}")))?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST_NAME);
        let content = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&content).map_err(|e| Error::Parse {
            path,
            offset: json_byte_offset(&content, e.line(), e.column()),
            message: e.to_string(),
        })
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(hex_encode(&digest))
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// If `dir` carries a run manifest, verify its recorded input files are
/// unchanged; stale upstreams are a validation error.
pub fn verify_upstream(dir: &Path) -> Result<()> {
    if !dir.join(RUN_MANIFEST_NAME).exists() {
        return Ok(());
    }
    let manifest = RunManifest::read(dir)?;
    for (path, recorded) in &manifest.input_hashes {
        let path = Path::new(path);
        if !path.exists() {
            continue; // inputs may legitimately have been cleaned up
        }
        let current = hash_file(path)?;
        if &current != recorded {
            return Err(Error::validation(format!(
                "stale stage outputs in {}: input {} changed since the stage ran",
                dir.display(),
                path.display()
            )));
        }
    }
    Ok(())
}

pub fn json_byte_offset(content: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in content.lines().enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}
