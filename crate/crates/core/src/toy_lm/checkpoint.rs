//! Binary checkpoint: magic, little-endian u64 header length, JSON header,
//! f64 little-endian tensor data, then a SHA-256 of everything before it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ModelConfig, ModelParams};
use super::ModelError;
use crate::numeric::DenseArray;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ULMCKPT\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint(params: &ModelParams, mut w: impl Write) -> Result<(), ModelError> {
    let header = Header {
        version: FORMAT_VERSION,
        config: *params.config(),
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * params.num_parameters() + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in params.tensors() {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    w.write_all(&buf)?;
    w.write_all(&digest)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelParams, ModelError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < CHECKPOINT_MAGIC.len() + 8 + 32 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[16..json_end]).map_err(|e| bad(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let mut data = body[json_end..].chunks_exact(8);
    if data.len() * 8 != body.len() - json_end {
        return Err(bad("tensor data is not a whole number of f64 values"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < n {
            return Err(bad(format!("tensor {} is truncated", entry.name)));
        }
        let values = (&mut data)
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(DenseArray::new(entry.shape.clone(), values)?);
    }
    if data.len() != 0 {
        return Err(bad("trailing tensor data"));
    }
    let params = ModelParams::from_parts(header.config, tensors)?;
    if params.names().iter().zip(&header.tensors).any(|(a, b)| *a != b.name) {
        return Err(bad("tensor names do not match the model layout"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    read_checkpoint(std::fs::File::open(path)?)
}
