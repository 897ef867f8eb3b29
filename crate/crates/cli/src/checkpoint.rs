//! Binary checkpoint format (.mbf): magic "MBF1", a u32 format version, a
//! JSON header (model config, provenance, vocabulary, tensor directory),
//! then raw little-endian f32 tensor data. Loading verifies the magic, the
//! version and every tensor's byte extent before touching the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use finsent_core::autograd::Scalar;
use finsent_core::model::{ModelConfig, Param, ParamSet};

pub const MAGIC: &[u8; 4] = b"MBF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where a checkpoint came from: the seed and config hash that produced it,
/// plus the hash of the checkpoint it continued from, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub parent: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    provenance: Provenance,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A loaded (or about-to-be-saved) model artifact: parameters plus the
/// vocabulary and provenance they belong with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub vocab: Vec<String>,
    pub provenance: Provenance,
}

// The f32 casts are identities in the default build but real under the
// double-precision feature.
#[allow(clippy::unnecessary_cast)]
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, param) in checkpoint.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: param.shape.clone(),
            offset: payload.len() as u64,
        });
        for &v in &param.value {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        config: checkpoint.params.config.clone(),
        provenance: checkpoint.provenance.clone(),
        vocab: checkpoint.vocab.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Corrupt(format!("header serialization failed: {e}")))?;

    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    file.write_all(&payload).map_err(|e| io_err(path, e))?;
    Ok(())
}

#[allow(clippy::unnecessary_cast)]
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Corrupt(
            "file shorter than the fixed preamble".into(),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CheckpointError::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| CheckpointError::Corrupt("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(CheckpointError::Corrupt(format!(
            "declared header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CheckpointError::Corrupt(format!("header JSON invalid: {e}")))?;
    let payload = &bytes[header_end..];

    let mut entries = IndexMap::new();
    for t in &header.tensors {
        let numel: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start.checked_add(numel * 4).ok_or_else(|| {
            CheckpointError::Corrupt(format!("tensor {} extent overflows", t.name))
        })?;
        if end > payload.len() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {} needs bytes {start}..{end} but payload has {}",
                t.name,
                payload.len()
            )));
        }
        let mut value = Vec::with_capacity(numel);
        for chunk in payload[start..end].chunks_exact(4) {
            value.push(f32::from_le_bytes(chunk.try_into().unwrap()) as Scalar);
        }
        entries.insert(
            t.name.clone(),
            Param {
                shape: t.shape.clone(),
                value,
            },
        );
    }
    let expected_payload: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected_payload {
        return Err(CheckpointError::Corrupt(format!(
            "payload is {} bytes, tensor directory accounts for {expected_payload}",
            payload.len()
        )));
    }

    Ok(Checkpoint {
        params: ParamSet::from_entries(header.config, entries),
        vocab: header.vocab,
        provenance: header.provenance,
    })
}

/// Hex SHA-256 of a file, used for checkpoint lineage.
pub fn file_hash(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of a serializable value's canonical JSON form.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("hashable value serializes");
    hex::encode(Sha256::digest(&bytes))
}
