//! Checkpoint files.
//!
//! ```text
//! "CVCK" | version u32 | header_len u64 | header JSON (header_len bytes)
//! | f64 blocks: A, W1, b1, gamma, beta, running_mean, running_var, W2, b2
//! ```
//!
//! All integers and floats little-endian. Optimizer moments are not stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Adapter, Head, Model};

const MAGIC: [u8; 4] = *b"CVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub step: u64,
    pub epoch: Option<usize>,
}

pub fn encode(model: &Model, step: u64, epoch: Option<usize>) -> Result<Vec<u8>> {
    let h = &model.head;
    let header = CheckpointHeader {
        dim: model.dim(),
        hidden: h.hidden,
        dropout: h.dropout,
        bn_momentum: h.bn_momentum,
        bn_eps: h.bn_eps,
        step,
        epoch,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let blocks: [&[f64]; 9] = [
        &model.adapter.weight,
        &h.w1,
        &h.b1,
        &h.gamma,
        &h.beta,
        &h.running_mean,
        &h.running_var,
        &h.w2,
        std::slice::from_ref(&h.b2),
    ];
    for block in blocks {
        for x in block {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Model)> {
    let truncated = |offset: usize, needed: usize| Error::Truncated {
        offset: offset as u64,
        needed: needed as u64,
        len: bytes.len() as u64,
    };
    if bytes.len() < 16 {
        return Err(truncated(0, 16));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + json_len).ok_or_else(|| truncated(16, json_len))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let (d, h) = (header.dim, header.hidden);
    let mut offset = 16 + json_len;
    let mut read = |n: usize| -> Result<Vec<f64>> {
        let raw = bytes.get(offset..offset + n * 8).ok_or_else(|| truncated(offset, n * 8))?;
        offset += n * 8;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let adapter = Adapter { dim: d, weight: read(d * d)? };
    let head = Head {
        dim: d,
        hidden: h,
        w1: read(h * d)?,
        b1: read(h)?,
        gamma: read(h)?,
        beta: read(h)?,
        running_mean: read(h)?,
        running_var: read(h)?,
        w2: read(h)?,
        b2: read(1)?[0],
        dropout: header.dropout,
        bn_momentum: header.bn_momentum,
        bn_eps: header.bn_eps,
    };
    if offset != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - offset
        )));
    }
    Ok((header, Model { adapter, head }))
}

pub fn save(path: &Path, model: &Model, step: u64, epoch: Option<usize>) -> Result<()> {
    fs::write(path, encode(model, step, epoch)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Model)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
