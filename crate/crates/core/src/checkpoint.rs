//! Binary container for model and adapter parameters.
//!
//! Layout:
//!
//! ```text
//! b"PBLB" | version: u32 LE | header_len: u64 LE | header (JSON, UTF-8) | blob
//! ```
//!
//! The header holds the config snapshot, seed manifest, step count and a
//! manifest of `(name, shape, offset)` entries; `offset` is the byte offset
//! of each little-endian f32 array within the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::AdapterSpec;
use crate::diff::{ParamSet, Tensor};
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 4] = b"PBLB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CheckpointKind {
    Model { model: ModelConfig },
    Adapter { model: ModelConfig, spec: AdapterSpec, base_hash: String },
}

impl CheckpointKind {
    pub fn model_config(&self) -> &ModelConfig {
        match self {
            CheckpointKind::Model { model } | CheckpointKind::Adapter { model, .. } => model,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    kind: CheckpointKind,
    seeds: BTreeMap<String, u64>,
    steps: u64,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub params: ParamSet<f32>,
    pub seeds: BTreeMap<String, u64>,
    pub steps: u64,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for p in self.params.entries() {
            tensors.push(ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset: blob.len() as u64 });
            blob.extend_from_slice(&p.value.to_le_bytes());
        }
        let header = Header { kind: self.kind.clone(), seeds: self.seeds.clone(), steps: self.steps, tensors };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize.checked_add(header_len).ok_or(CheckpointError::Truncated("header"))?;
        if bytes.len() < blob_start {
            return Err(CheckpointError::Truncated("header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..blob_start])?;
        let blob = &bytes[blob_start..];
        let mut params = ParamSet::new();
        let mut expected = 0u64;
        for e in header.tensors {
            if e.offset != expected {
                return Err(CheckpointError::Corrupt(format!("{}: offset {} expected {expected}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * 4;
            let raw = blob.get(start..end).ok_or(CheckpointError::Truncated("tensor data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
            params.insert(e.name, t).map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
            expected = end as u64;
        }
        if expected as usize != blob.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", blob.len() - expected as usize)));
        }
        Ok(Self { kind: header.kind, params, seeds: header.seeds, steps: header.steps })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized container.
    pub fn file_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
