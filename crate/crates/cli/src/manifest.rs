//! Per-command manifest written next to the outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub resolved: Value,
    pub seed: u64,
    pub version: String,
    /// File name (relative to the output directory) to sha256.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        resolved: Value,
        seed: u64,
    ) -> Result<Self, CliError> {
        let config_sha256 = config_path.map(sha256_file).transpose()?;
        Ok(RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config_sha256,
            resolved,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: BTreeMap::new(),
        })
    }

    /// Hashes every regular file under `dir` except the manifest itself.
    pub fn hash_dir(&mut self, dir: &Path) -> Result<(), CliError> {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let entries = std::fs::read_dir(&d).map_err(|e| CliError::io(&d, e))?;
            for entry in entries {
                let path = entry.map_err(|e| CliError::io(&d, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().is_some_and(|n| n != "manifest.json") {
                    let rel = path
                        .strip_prefix(dir)
                        .unwrap_or(&path)
                        .to_string_lossy()
                        .replace('\\', "/");
                    self.artifacts.insert(rel, sha256_file(&path)?);
                }
            }
        }
        Ok(())
    }

    pub fn add_file(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.artifacts.insert(name.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::runtime("json", e.to_string()))?
            + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
