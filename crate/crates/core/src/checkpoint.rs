//! Versioned binary checkpoints: magic, format version, a JSON header and
//! the flat parameter vector as little-endian f64.

use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KPCK";
pub const VERSION: u32 = 1;

pub fn encode(header: &Value, params: &[f64]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(20 + h.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<f64>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if rest.len() < hlen + 8 {
        return Err(bad("truncated header"));
    }
    let header: Value = serde_json::from_slice(&rest[..hlen])?;
    let count = u64::from_le_bytes(rest[hlen..hlen + 8].try_into().unwrap()) as usize;
    let body = &rest[hlen + 8..];
    if body.len() != count * 8 {
        return Err(bad("parameter payload length mismatch"));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, params))
}

pub fn write(path: &Path, header: &Value, params: &[f64]) -> Result<()> {
    fs::write(path, encode(header, params)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Value, Vec<f64>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Header of a checkpoint, checking its `kind` field.
pub fn read_kind(path: &Path, kind: &str) -> Result<(Value, Vec<f64>)> {
    let (header, params) = read(path)?;
    match header.get("kind").and_then(Value::as_str) {
        Some(k) if k == kind => Ok((header, params)),
        other => Err(Error::Checkpoint(format!(
            "{}: expected a {kind} checkpoint, found {other:?}",
            path.display()
        ))),
    }
}

/// Content id: sha256 of the encoded checkpoint, hex.
pub fn id_of(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_id(path: &Path) -> Result<String> {
    Ok(id_of(&fs::read(path).map_err(|e| Error::io(path, e))?))
}
