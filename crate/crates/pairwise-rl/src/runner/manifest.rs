//! The run manifest: which stages completed, with what inputs and outputs.
//!
//! One `manifest.json` lives in each output directory. For every completed
//! stage it records the sha256 of each input consumed and each artifact
//! written. That record backs three guarantees:
//!
//! * a stage may start only when its declared inputs exist on disk;
//! * artifacts that drift from the hash their producer recorded are
//!   detected (integrity) instead of silently consumed;
//! * a re-run whose inputs and outputs all match the record is a no-op
//!   unless forced.
//!
//! The manifest also pins the config hash; loading a manifest written under
//! a different config discards the stage records so everything re-runs.
//! Nothing time- or host-dependent is stored — a re-run with identical
//! config and seeds rewrites the manifest byte-identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Manifest schema version.
pub const MANIFEST_VERSION: u32 = 1;

/// File name of the manifest inside an output directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Hashes of everything one completed stage consumed and produced.
/// Keys are paths relative to the output directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Completion state of one output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    /// A fresh manifest with no completed stages.
    pub fn new(config_hash: &str) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            stages: BTreeMap::new(),
        }
    }

    fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    /// Loads the directory's manifest, or starts a fresh one if none exists.
    /// A manifest written under a different config hash keeps nothing: every
    /// stage record is discarded so the new configuration re-runs from the
    /// start. A malformed manifest is an error, not a silent reset.
    pub fn load_or_new(out_dir: &Path, config_hash: &str) -> Result<Self> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let text = std::fs::read_to_string(&path)?;
        let loaded: RunManifest = serde_json::from_str(&text).map_err(|e| {
            Error::Format(format!("{}: malformed manifest: {e}", path.display()))
        })?;
        if loaded.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "{}: manifest version {} unsupported (this build reads version {MANIFEST_VERSION})",
                path.display(),
                loaded.version
            )));
        }
        if loaded.config_hash != config_hash {
            return Ok(Self::new(config_hash));
        }
        Ok(loaded)
    }

    /// Writes the manifest atomically (temp file + rename).
    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        text.push('\n');
        write_atomic(&Self::path(out_dir), text.as_bytes())
    }

    /// The record of a completed stage, if any.
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.get(name)
    }

    /// Replaces the record for `name` with freshly computed hashes.
    pub fn record_stage(&mut self, name: &str, record: StageRecord) {
        self.stages.insert(name.to_string(), record);
    }
}
