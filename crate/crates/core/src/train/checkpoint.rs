//! `ACLAMCK1` checkpoints: magic, `u32` header length, JSON header listing
//! every named array with its shape and byte offset into the payload, then the
//! arrays as little-endian f32.

use crate::model::{ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ACLAMCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an ACLAMCK1 checkpoint")]
    BadMagic,
    #[error("checkpoint truncated: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arrays: Vec<ArrayEntry>,
    config_snapshot: Value,
}

/// Parameters plus the free-form configuration they were trained with. The
/// snapshot must carry the model geometry under the `"model"` key.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub config_snapshot: Value,
}

/// Serializes `params` together with `snapshot`; the model config is stored
/// under `snapshot["model"]`, overriding whatever was there.
pub fn save_checkpoint(params: &ModelParams<f32>, snapshot: &Value) -> Vec<u8> {
    let mut snap = match snapshot {
        Value::Object(m) => m.clone(),
        Value::Null => Default::default(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("extra".into(), other.clone());
            m
        }
    };
    snap.insert(
        "model".into(),
        serde_json::to_value(&params.config).expect("config serializes"),
    );
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in params.named() {
        arrays.push(ArrayEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        format_version: 1,
        arrays,
        config_snapshot: Value::Object(snap),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Parses a checkpoint. With `expected` set, the stored model geometry must
/// match it exactly.
pub fn load_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let start = 12 + hlen;
    if bytes.len() < start {
        return Err(CheckpointError::Truncated {
            needed: start,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[12..start])?;
    if header.format_version != 1 {
        return Err(CheckpointError::Mismatch(format!(
            "format_version {}",
            header.format_version
        )));
    }
    let model: ModelConfig = serde_json::from_value(
        header
            .config_snapshot
            .get("model")
            .cloned()
            .ok_or_else(|| CheckpointError::Mismatch("snapshot has no model config".into()))?,
    )?;
    if let Some(exp) = expected {
        if exp != &model {
            return Err(CheckpointError::Mismatch(format!(
                "stored model {} differs from requested {}",
                serde_json::to_string(&model)?,
                serde_json::to_string(exp)?
            )));
        }
    }
    let mut params = ModelParams::<f32>::init(&model, 0);
    let names: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if names.len() != header.arrays.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} arrays stored, model has {}",
            header.arrays.len(),
            names.len()
        )));
    }
    let payload = &bytes[start..];
    let mut end = 0;
    for ((tensor, (name, shape)), entry) in params.tensors_mut().into_iter().zip(&names).zip(&header.arrays) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CheckpointError::Mismatch(format!(
                "array {} {:?} where the model expects {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let n = tensor.len() * 4;
        let stop = entry.offset + n;
        if payload.len() < stop {
            return Err(CheckpointError::Truncated {
                needed: start + stop,
                found: bytes.len(),
            });
        }
        for (dst, c) in tensor
            .data_mut()
            .iter_mut()
            .zip(payload[entry.offset..stop].chunks_exact(4))
        {
            *dst = f32::from_le_bytes(c.try_into().unwrap());
        }
        end = end.max(stop);
    }
    if payload.len() != end {
        return Err(CheckpointError::Mismatch(format!(
            "{} trailing payload bytes",
            payload.len() - end
        )));
    }
    Ok(Checkpoint {
        params,
        config_snapshot: header.config_snapshot,
    })
}

pub fn write_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    snapshot: &Value,
) -> Result<(), CheckpointError> {
    std::fs::write(path, save_checkpoint(params, snapshot))?;
    Ok(())
}

pub fn read_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint, CheckpointError> {
    load_checkpoint(&std::fs::read(path)?, expected)
}
