//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"KGATCKPT"
//! 8       8     u64 header length H in bytes
//! 16      H     UTF-8 JSON header: {"tensors":[{"name":..,"shape":[..],"offset":..}, ..]}
//! 16+H    8*N   f64 values of every tensor, concatenated in header order
//! ```
//!
//! `offset` counts `f64` elements from the start of the data section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KGATCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode(tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header { tensors: entries })?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    if !data.len().is_multiple_of(8) {
        return Err(Error::Checkpoint("data section is not a whole number of f64".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    header
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` out of bounds", e.name)))?;
            Ok((e.name, Tensor::new(e.shape, slice.to_vec())?))
        })
        .collect()
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}
