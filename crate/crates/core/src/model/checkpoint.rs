//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `MSPTCKPT`, the header length as a
//! little-endian `u64`, a JSON header, then every tensor as little-endian
//! `f32` values. Tensor offsets in the header are byte offsets from the
//! start of the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mspt, MsptParams, ModelConfig, Normalizer};
use crate::numerics::{Real, Tensor};

const MAGIC: &[u8; 8] = b"MSPTCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A loaded checkpoint: the model and free-form metadata saved with it.
pub struct Checkpoint<T: Real> {
    pub model: Mspt<T>,
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<T: Real>(
    out: &mut impl Write,
    model: &Mspt<T>,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut offset = 0u64;
    let tensors = model
        .params
        .names()
        .iter()
        .zip(model.params.tensors())
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        version: VERSION,
        config: model.config.clone(),
        normalizer: model.normalizer.clone(),
        tensors,
        meta: meta.clone(),
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in model.params.tensors() {
        for &x in t.data() {
            buf.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt("checkpoint header is truncated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    header.config.validate()?;
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected = 0u64;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(Error::Format(format!("tensor {} has offset {}", e.name, e.offset)));
        }
        let start = e.offset as usize;
        let end = start + 4 * n;
        let raw = payload.get(start..end).ok_or_else(|| {
            Error::Corrupt(format!("checkpoint payload is truncated at tensor {}", e.name))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        expected = end as u64;
    }
    if payload.len() as u64 != expected {
        return Err(Error::Corrupt(format!(
            "checkpoint payload has {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let params = MsptParams::from_tensors(&header.config, tensors)?;
    Ok(Checkpoint {
        model: Mspt {
            config: header.config,
            params,
            normalizer: header.normalizer,
        },
        meta: header.meta,
    })
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &Mspt<T>,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, meta)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    read_checkpoint(&std::fs::read(path)?)
}
