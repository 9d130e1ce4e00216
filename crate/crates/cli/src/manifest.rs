use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub output: String,
    pub effective_config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: Option<u64>, output: &Path, effective_config: impl Serialize) -> CliResult<Self> {
        Ok(Self {
            version: MANIFEST_VERSION,
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            output: output.display().to_string(),
            effective_config: serde_json::to_value(effective_config).map_err(sdctc::Error::from)?,
            artifacts: Vec::new(),
        })
    }

    pub fn add(&mut self, name: &str, bytes: &[u8]) {
        self.artifacts.push(Artifact { path: name.into(), sha256: sha256_hex(bytes) });
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(sdctc::Error::from)?;
        bytes.push(b'\n');
        write_output(path, &bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Atomic write; failures are reported as unwritable output paths.
pub fn write_output(path: &Path, bytes: &[u8]) -> CliResult<()> {
    sdctc::io::write_atomic(path, bytes).map_err(|source| CliError::Unwritable { path: path.into(), source })
}

/// Manifest location for a single-file output: `<file>.manifest.json`.
pub fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
