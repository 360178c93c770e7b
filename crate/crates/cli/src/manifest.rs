//! Run manifests: what was run, on which inputs, and what it produced.
//!
//! The manifest is written with status `running` before any work starts and
//! rewritten once the command finishes. Hashes are git-style: SHA-256 over
//! `blob <len>\0` followed by the content, so they depend on bytes only.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use stfuse::simstudy::{ScenarioConfig, TrueParams};

use crate::error::{CliError, CliResult};

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub config_path: Option<String>,
    pub config: ScenarioConfig,
    pub resolved_truth: TrueParams,
    pub seed: u64,
    pub threads: usize,
    /// Hash over the hashes of all inputs, in name order.
    pub input_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub versions: Versions,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub stfuse: String,
    pub stfuse_cli: String,
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn combined_hash(entries: &[FileHash]) -> String {
    let listing: String = entries.iter().map(|e| format!("{} {}\n", e.sha256, e.name)).collect();
    blob_hash(listing.as_bytes())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    /// `inputs` are `(name, bytes)`; the resolved configuration is always one of them.
    pub fn new(command: &str, config_path: Option<&Path>, config: &ScenarioConfig, inputs: Vec<(String, Vec<u8>)>) -> Self {
        let mut hashes: Vec<FileHash> = inputs
            .iter()
            .map(|(name, bytes)| FileHash {
                name: name.clone(),
                sha256: blob_hash(bytes),
            })
            .chain(std::iter::once(FileHash {
                name: "config.toml".into(),
                sha256: blob_hash(config.to_toml().as_bytes()),
            }))
            .collect();
        hashes.sort_by(|a, b| a.name.cmp(&b.name));
        Self {
            command: command.into(),
            status: "running".into(),
            message: None,
            config_path: config_path.map(|p| p.display().to_string()),
            config: config.clone(),
            resolved_truth: config.resolved_truth(),
            seed: config.seed,
            threads: rayon::current_num_threads(),
            input_hash: combined_hash(&hashes),
            inputs: hashes,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: None,
            versions: Versions {
                stfuse: stfuse::VERSION.into(),
                stfuse_cli: env!("CARGO_PKG_VERSION").into(),
            },
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Records the outcome and the hashes of `outputs`, then rewrites the file.
    pub fn finish(&mut self, dir: &Path, outputs: &[PathBuf], outcome: &CliResult<()>) -> CliResult<()> {
        self.finished_unix = Some(now());
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "failed".into();
                self.message = Some(e.to_string());
            }
        }
        self.outputs = outputs
            .iter()
            .filter_map(|p| {
                let bytes = std::fs::read(p).ok()?;
                Some(FileHash {
                    name: p.file_name()?.to_string_lossy().into_owned(),
                    sha256: blob_hash(&bytes),
                })
            })
            .collect();
        self.write(dir)
    }
}
