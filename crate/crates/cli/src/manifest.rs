use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Cli;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the manifest directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub seed: u64,
    pub out_dir: String,
    pub threads: usize,
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub flags: Flags,
    pub kernels: Vec<String>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<OutputEntry>,
    pub wall_clock_secs: f64,
    pub status: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(cli: &Cli, argv: &[String]) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: cli.command.name().to_string(),
            argv: argv.to_vec(),
            flags: Flags {
                seed: cli.seed,
                out_dir: cli.out_dir.display().to_string(),
                threads: cli.threads,
                format: format!("{:?}", cli.format).to_lowercase(),
            },
            kernels: cli.command.kernels(),
            seeds: vec![cli.seed],
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            status: "ok".to_string(),
        }
    }

    /// Writes `bytes` to `dir/name` and records it relative to `root`.
    pub fn emit(&mut self, root: &Path, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.record(root, &path, bytes);
        Ok(path)
    }

    pub fn record(&mut self, root: &Path, path: &Path, bytes: &[u8]) {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs.push(OutputEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    pub fn add_kernels(&mut self, kernels: impl IntoIterator<Item = String>) {
        for k in kernels {
            if !self.kernels.contains(&k) {
                self.kernels.push(k);
            }
        }
    }

    pub fn add_seed(&mut self, seed: u64) {
        if !self.seeds.contains(&seed) {
            self.seeds.push(seed);
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Malformed(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Malformed(e.to_string()))
    }

    /// Entries whose file is missing or whose hash no longer matches.
    pub fn stale_outputs(&self, dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|o| std::fs::read(dir.join(&o.path)).map_or(true, |b| sha256_hex(&b) != o.sha256))
            .map(|o| o.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
