//! Run manifests written next to every output as `<out>.manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        Self { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timings: Timings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    details: Option<serde_json::Value>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: Vec::new(),
            details: None,
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest::of(path, bytes));
    }

    pub fn details(&mut self, details: &impl Serialize) {
        self.details = serde_json::to_value(details).ok();
    }

    /// Writes `bytes` to `out`, then the manifest beside it.
    pub fn finish(self, out: &Path, bytes: &[u8]) -> CliResult<()> {
        std::fs::write(out, bytes).map_err(|e| CliError::io(out, e))?;
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            versions: BTreeMap::from([
                ("sae".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ]),
            inputs: self.inputs,
            outputs: vec![FileDigest::of(out, bytes)],
            timings: Timings { elapsed_seconds: self.started.elapsed().as_secs_f64() },
            details: self.details,
        };
        let path = manifest_path(out);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Input(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
