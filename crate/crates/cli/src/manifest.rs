//! Run manifests: one `manifest.json` per output directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: Value,
    pub seed: Option<u64>,
    /// sha256 over the resolved config and every input file, each entry
    /// framed as `name \0 length \0 bytes`.
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Content hash of `config` plus the named input files.
pub fn input_hash(config: &Value, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    let cfg = serde_json::to_vec(config)?;
    frame(&mut h, "config", &cfg);
    for p in inputs {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        frame(&mut h, &name, &bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn frame(h: &mut Sha256, name: &str, bytes: &[u8]) {
    h.update(name.as_bytes());
    h.update([0]);
    h.update(bytes.len().to_string().as_bytes());
    h.update([0]);
    h.update(bytes);
}

pub struct ManifestBuilder {
    command: String,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    threads: usize,
    started: u128,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Value, seed: Option<u64>, inputs: Vec<PathBuf>, threads: usize) -> Self {
        ManifestBuilder { command: command.to_string(), config, seed, inputs, threads, started: now_ms() }
    }

    /// Writes the manifest under `out`, listing `outputs` relative to it.
    pub fn finish(self, out: &Path, outputs: &[PathBuf]) -> Result<RunManifest> {
        let input_hash = input_hash(&self.config, &self.inputs)?;
        let rel = |p: &PathBuf| p.strip_prefix(out).unwrap_or(p).display().to_string();
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config: self.config,
            seed: self.seed,
            input_hash,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(rel).collect(),
            threads: self.threads,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let path = out.join(FILE_NAME);
        let body = serde_json::to_string_pretty(&m)?;
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(m)
    }
}
