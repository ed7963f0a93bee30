//! Run manifests: enough provenance to replay a command and prove the replay
//! reproduced the outputs.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Written next to every produced artifact. The config snapshot and seed are
/// everything the command consulted, so replaying them reproduces the outputs
/// bit for bit; the recorded hashes let the replay prove it. Timestamps are
/// the only fields expected to differ between identical runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_utc: String,
    pub finished_utc: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: serde_json::Value) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            seed,
            config,
            started_utc: now_rfc3339(),
            finished_utc: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records an input file and its content hash.
    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(hash_entry(path)?);
        Ok(())
    }

    /// Records a produced file and its content hash. Call after writing it.
    pub fn add_output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(hash_entry(path)?);
        Ok(())
    }

    /// Stamps the end time and writes the manifest as pretty JSON.
    pub fn write(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_utc = now_rfc3339();
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Data(format!("manifest serialization: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let err = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut file = File::open(path).map_err(err)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(err)?;
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn hash_entry(path: &Path) -> Result<FileHash, CliError> {
    Ok(FileHash { path: path.display().to_string(), sha256: sha256_file(path)? })
}

/// `<file>.manifest.json` next to the artifact it describes. The full file
/// name stays in the manifest name so same-stem artifacts in one directory
/// keep distinct manifests.
pub fn manifest_path_for(artifact: &Path) -> PathBuf {
    let name = artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    artifact.with_file_name(format!("{name}.manifest.json"))
}
