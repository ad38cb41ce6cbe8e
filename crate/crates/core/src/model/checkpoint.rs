//! Binary tensor checkpoints.
//!
//! Layout (little-endian): magic `MRG1`, `u32` version, `u64` header length,
//! a JSON header listing every tensor's name, shape, dtype, byte offset and
//! byte length, then the raw payloads back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{Float, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MRG1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset from the start of the payload section.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
}

/// Serialises named tensors into the checkpoint byte layout.
pub fn encode<T: Float>(tensors: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if entries.iter().any(|e: &TensorEntry| e.name == *name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        let offset = payload.len() as u64;
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.into(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header { tensors: entries })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_as<T: Float>(dtype: &str, bytes: &[u8]) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

/// Parses checkpoint bytes, converting every payload to `T`.
pub fn decode<T: Float>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing MRG1 magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Checkpoint(format!("header length {hlen} exceeds file size {}", bytes.len()))
    })?;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    let payload = &bytes[body..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if end > payload.len() || start > end {
            return Err(Error::Checkpoint(format!("tensor {} overruns the payload", e.name)));
        }
        let data = read_as::<T>(&e.dtype, &payload[start..end])?;
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        out.push((e.name, t));
    }
    Ok(out)
}

pub fn save<T: Float>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    decode(&fs::read(path)?)
}
