//! Versioned encoder checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PDCK" | u32 version | u64 header_len | header (JSON)
//!         | f32 payload, tensors in manifest order, row-major
//!         | sha256 of everything before it
//! ```
//!
//! The JSON header carries the role, the [`EncoderConfig`], free-form string
//! metadata and the tensor manifest (name and shape).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Encoder, EncoderConfig, Param, Role};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PDCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    role: Role,
    config: EncoderConfig,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub metadata: BTreeMap<String, String>,
}

pub fn to_bytes(encoder: &Encoder, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let header = Header {
        role: encoder.role(),
        config: *encoder.config(),
        metadata: metadata.clone(),
        tensors: encoder
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * encoder.parameter_count() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in encoder.params() {
        for v in p.value.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::corrupt(path, m);
    if bytes.len() < 16 + 32 {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..4] != MAGIC {
        return Err(corrupt("not an encoder checkpoint"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_bytes = body.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let mut payload = &body[16 + hlen..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        if payload.len() < 4 * n {
            return Err(corrupt("truncated payload"));
        }
        let (chunk, rest) = payload.split_at(4 * n);
        payload = rest;
        let values: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("length checked");
        params.push(Param {
            name: t.name.clone(),
            value,
        });
    }
    if !payload.is_empty() {
        return Err(corrupt("trailing bytes after payload"));
    }
    let encoder = Encoder::from_parts(header.role, header.config, params)?;
    Ok(Checkpoint {
        encoder,
        metadata: header.metadata,
    })
}

pub fn save(path: &Path, encoder: &Encoder, metadata: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, to_bytes(encoder, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
