//! Per-command run record written next to every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// `sha256:<hex>` of the checkpoint as a git blob (`blob <len>\0` + bytes).
    pub checkpoint_hash: Option<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

pub fn checkpoint_hash(path: &Path) -> Result<String, CliError> {
    Ok(blob_hash(&fs::read(path)?))
}

impl RunManifest {
    pub fn begin(command: &str, config: &BTreeMap<String, String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config: config.clone(),
            seed,
            started_at: now(),
            finished_at: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint_hash: None,
        }
    }

    /// Where the manifest for `out` goes: inside it when it is a directory,
    /// otherwise as `<out>.manifest.json` beside it.
    pub fn location(out: &Path) -> PathBuf {
        if out.is_dir() {
            out.join(MANIFEST_NAME)
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".");
            name.push(MANIFEST_NAME);
            out.with_file_name(name)
        }
    }

    pub fn finish(mut self, out: &Path) -> Result<PathBuf, CliError> {
        self.finished_at = now();
        let path = Self::location(out);
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
