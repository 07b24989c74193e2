use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a command: the resolved configuration, its
/// seed and digests of every file it read.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    /// SHA-256 over the canonical config followed by every input digest.
    pub content_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> anyhow::Result<InputDigest> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(InputDigest {
        path: path.to_path_buf(),
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: Value, inputs: Vec<InputDigest>) -> anyhow::Result<Self> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&config)?);
        for input in &inputs {
            h.update(input.sha256.as_bytes());
        }
        Ok(Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            inputs,
            content_hash: hex(&h.finalize()),
        })
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(format!("manifest-{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
