use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command: its arguments, the resolved
/// settings, and digests of what it read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub engine_version: String,
    pub started_at: String,
    pub finished_at: String,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects a manifest over the lifetime of one command.
pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn start(command: &str, args: &[String], inputs: &[PathBuf]) -> Result<Self, CliError> {
        Ok(ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                args: args.to_vec(),
                seed: 0,
                config: serde_json::Value::Null,
                inputs: digests(inputs)?,
                outputs: Vec::new(),
                engine_version: ENGINE_VERSION.to_string(),
                started_at: now(),
                finished_at: String::new(),
            },
        })
    }

    pub fn config<T: Serialize>(&mut self, seed: u64, config: &T) {
        self.manifest.seed = seed;
        self.manifest.config = serde_json::to_value(config).expect("settings serialise");
    }

    /// Writes the manifest to `explicit`, else `<default_next_to>.manifest.json`,
    /// else stderr.
    pub fn finish(mut self, outputs: &[PathBuf], explicit: Option<&Path>, default_next_to: Option<&Path>) -> Result<RunManifest, CliError> {
        self.manifest.outputs = digests(outputs)?;
        self.manifest.finished_at = now();
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        let target = explicit
            .map(Path::to_path_buf)
            .or_else(|| default_next_to.map(|p| PathBuf::from(format!("{}.manifest.json", p.display()))));
        match target {
            Some(path) => fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?,
            None => eprintln!("manifest {}", serde_json::to_string(&self.manifest).expect("manifest serialises")),
        }
        Ok(self.manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
}

/// Fails when an input recorded in the manifest has changed since.
pub fn verify_inputs(m: &RunManifest) -> Result<(), CliError> {
    for d in &m.inputs {
        let now = sha256_file(Path::new(&d.path))?;
        if now != d.sha256 {
            return Err(CliError::Usage(format!("{} changed since the manifest was written", d.path)));
        }
    }
    Ok(())
}
