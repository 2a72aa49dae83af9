//! Provenance records written next to every command's outputs.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Enough to re-run a command bit-identically in reference mode. Contains
/// no timestamps so reruns produce identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Hash of the canonical JSON of the effective configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    /// `--set` overrides in the order given.
    pub overrides: Vec<String>,
    /// Input path (as given) to content hash.
    pub inputs: BTreeMap<String, String>,
    /// External tool and environment settings that influenced the run.
    pub environment: BTreeMap<String, String>,
    /// Named facts about the outputs, such as the checkpoint hash used for scoring.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    pub threads: usize,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, overrides: Vec<String>) -> Result<Self> {
        let canonical = serde_json::to_vec(&config)?;
        Ok(Self {
            command: command.into(),
            tool_version: format!("aqlearn {}", env!("CARGO_PKG_VERSION")),
            seed,
            config_hash: sha256_bytes(&canonical),
            config,
            overrides,
            inputs: BTreeMap::new(),
            environment: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            threads: rayon::current_num_threads(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<String> {
        let h = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), h.clone());
        Ok(h)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn file_hash_matches_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let data: Vec<u8> = (0..200_000u32).map(|i| (i % 251) as u8).collect();
        std::fs::write(&p, &data).unwrap();
        assert_eq!(sha256_file(&p).unwrap(), sha256_bytes(&data));
    }
}
