//! "EDN1" checkpoint container.
//!
//! Layout: magic `EDN1`, one version byte, u64 little-endian header length,
//! UTF-8 JSON header, then the raw payload of f32 little-endian values.
//! The header carries the training config, the EMA momentum and an ordered
//! tensor table; each entry's `offset` counts f32 elements from the start of
//! the payload. Query tensors are prefixed `query.`, key tensors `key.`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{ParamSet, Tensor};
use super::ModelPair;
use crate::contrastive::TrainConfig;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDN1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    momentum: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub pair: ModelPair<T>,
    pub config: TrainConfig,
}

pub fn encode_checkpoint<T: Scalar>(pair: &ModelPair<T>, config: &TrainConfig) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0usize;
    for (prefix, set) in [("query", &pair.query), ("key", &pair.key)] {
        for t in set.tensors() {
            entries.push(TensorEntry {
                name: format!("{prefix}.{}", t.name),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.data.len();
            for v in &t.data {
                payload.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
    }
    let header = Header {
        config: config.clone(),
        momentum: pair.momentum.as_f64(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(13 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    if bytes.len() < 13 {
        return Err(CheckpointError::Header("file shorter than fixed preamble".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: bytes[4],
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let header_end = 13usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Header("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[13..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[header_end..];
    if payload.len() % 4 != 0 {
        return Err(CheckpointError::Inconsistent(format!(
            "payload of {} bytes is not a whole number of f32 values",
            payload.len()
        )));
    }
    let available = payload.len() / 4;

    let mut query = Vec::new();
    let mut key = Vec::new();
    let mut expected_offset = 0usize;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        if entry.offset != expected_offset {
            return Err(CheckpointError::Inconsistent(format!(
                "tensor {} at offset {} but table implies {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        let end = entry.offset + len;
        if end > available {
            return Err(CheckpointError::Inconsistent(format!(
                "tensor {} needs values up to {end}, payload holds {available}",
                entry.name
            )));
        }
        let data = payload[entry.offset * 4..end * 4]
            .chunks_exact(4)
            .map(|c| T::of_f32(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        expected_offset = end;
        let (target, name) = if let Some(n) = entry.name.strip_prefix("query.") {
            (&mut query, n)
        } else if let Some(n) = entry.name.strip_prefix("key.") {
            (&mut key, n)
        } else {
            return Err(CheckpointError::Inconsistent(format!(
                "tensor {} lacks a query./key. prefix",
                entry.name
            )));
        };
        target.push(Tensor {
            name: name.to_string(),
            shape: entry.shape.clone(),
            data,
        });
    }
    if expected_offset != available {
        return Err(CheckpointError::Inconsistent(format!(
            "payload holds {available} values, tensor table describes {expected_offset}"
        )));
    }
    let pair = ModelPair {
        query: ParamSet::new(query),
        key: ParamSet::new(key),
        momentum: T::lit(header.momentum),
    };
    pair.validate()
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    Ok(Checkpoint {
        pair,
        config: header.config,
    })
}

pub fn save_checkpoint<T: Scalar>(
    pair: &ModelPair<T>,
    config: &TrainConfig,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(pair, config)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
