//! Checkpoint container:
//!
//! ```text
//! MTLE-CHECKPOINT <version>
//! sha256 <hex digest of the body>
//! <JSON body>
//! ```
//!
//! Floats are written with round-trip precision, so a reloaded checkpoint
//! predicts bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::model::Model;
use crate::rng::EngineRng;

use super::{TaskRegistry, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "MTLE-CHECKPOINT";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub vocab: Vocabulary,
    /// Always present in a saved checkpoint.
    pub model: Option<Model>,
    pub registry: TaskRegistry,
    pub config: TrainConfig,
    /// Init stream, used to draw embedding rows for tokens added later.
    pub rng: EngineRng,
    pub epochs_trained: usize,
}

impl ModelCheckpoint {
    pub(crate) fn new(vocab: Vocabulary, registry: TaskRegistry, config: TrainConfig, rng: EngineRng) -> Self {
        ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            vocab,
            model: None,
            registry,
            config,
            rng,
            epochs_trained: 0,
        }
    }

    pub fn model(&self) -> &Model {
        self.model.as_ref().expect("checkpoint carries a model")
    }

    fn body(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    /// Hex SHA-256 of the serialised body.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.body();
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        format!("{MAGIC} {}\nsha256 {digest}\n{body}", self.format_version).into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::CorruptCheckpoint(m.to_string());
        let text = std::str::from_utf8(bytes).map_err(|_| corrupt("not UTF-8"))?;
        let (header, rest) = text.split_once('\n').ok_or_else(|| corrupt("missing header"))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| corrupt("bad header line"))?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let (sum_line, body) = rest.split_once('\n').ok_or_else(|| corrupt("missing checksum"))?;
        let expected = sum_line.strip_prefix("sha256 ").ok_or_else(|| corrupt("bad checksum line"))?;
        if hex::encode(Sha256::digest(body.as_bytes())) != expected.trim() {
            return Err(corrupt("checksum mismatch"));
        }
        let ckpt: ModelCheckpoint =
            serde_json::from_str(body).map_err(|e| CheckpointError::CorruptCheckpoint(e.to_string()))?;
        if ckpt.format_version != version {
            return Err(corrupt("header and body versions disagree"));
        }
        if ckpt.model.is_none() {
            return Err(corrupt("no model parameters"));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ModelCheckpoint::from_bytes(&bytes)
}
