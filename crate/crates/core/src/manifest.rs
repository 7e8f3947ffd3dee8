//! Reproducibility record written next to every run's outputs: the exact
//! configuration, seeds, schema digest and input file digests that produced
//! them.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// crate version that produced the run
    pub version: String,
    /// subcommand name
    pub command: String,
    /// full configuration as a JSON value, whatever the command's config type is
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub schema_digest: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub threads: usize,
}

pub fn sha256_file(path: &Path) -> std::io::Result<InputDigest> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        bytes += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok(InputDigest { path: path.to_path_buf(), sha256: format!("{:x}", hasher.finalize()), bytes })
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> RunManifest {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seed: None,
            schema_digest: None,
            inputs: Vec::new(),
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).map(|s| s + "\n")?)
    }

    pub fn read(path: &Path) -> std::io::Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
