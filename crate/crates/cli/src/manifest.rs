//! Run manifests written next to command outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub base_seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    /// SHA-256 over `blob <len>\0<bytes>` of every input in order, hex.
    pub input_hash: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

/// Hash of the given byte strings, each framed like a git blob.
pub fn content_hash<'a>(blobs: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for b in blobs {
        h.update(format!("blob {}\0", b.len()).as_bytes());
        h.update(b);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_files(paths: &[PathBuf]) -> Result<String, CliError> {
    let data: Vec<Vec<u8>> = paths.iter().map(|p| read_bytes(p)).collect::<Result<_, _>>()?;
    Ok(content_hash(data.iter().map(|d| d.as_slice())))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Tracks one command invocation until its outputs are written.
pub struct ManifestBuilder {
    command: String,
    config_path: Option<PathBuf>,
    base_seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started: String,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder { command: command.into(), config_path: None, base_seed: None, inputs: Vec::new(), started: now() }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.base_seed = Some(seed);
        self
    }

    pub fn config(mut self, path: Option<&Path>) -> Self {
        if let Some(p) = path {
            self.config_path = Some(p.to_path_buf());
            self.inputs.push(p.to_path_buf());
        }
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    /// Writes `<primary output>.manifest.json` listing `outputs` and itself.
    /// Does nothing when the command produced no files.
    pub fn finish(self, outputs: &[PathBuf]) -> Result<Option<PathBuf>, CliError> {
        let Some(primary) = outputs.first() else {
            return Ok(None);
        };
        let path = PathBuf::from(format!("{}.manifest.json", primary.display()));
        let mut all = outputs.to_vec();
        all.push(path.clone());
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config_path: self.config_path,
            base_seed: self.base_seed,
            input_hash: hash_files(&self.inputs)?,
            inputs: self.inputs,
            started: self.started,
            finished: now(),
            outputs: all,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(path.clone(), e))?;
        Ok(Some(path))
    }
}
