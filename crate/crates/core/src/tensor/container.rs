//! Binary tensor container.
//!
//! Layout: an 8-byte little-endian header length `H`, then `H` bytes of JSON
//! header, then the data section. The header lists each tensor's name, shape,
//! dtype (always `"f64"`) and byte offset into the data section, plus a free
//! form `meta` object. Tensor payloads are little-endian `f64` in row-major
//! order.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("container io: {0}")]
    Io(#[from] io::Error),
    #[error("container header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed container: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus a JSON metadata object.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let fmt = |m: String| ContainerError::Format(m);
        if bytes.len() < 8 {
            return Err(fmt("truncated length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let data_start = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt(format!("header length {} exceeds file size", hlen)))?;
        let header: Header = serde_json::from_slice(&bytes[8..data_start])?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(fmt(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(8 * n)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| fmt(format!("tensor {}: payload out of bounds", e.name)))?;
            let vals = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, vals).map_err(|err| fmt(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<(), ContainerError> {
    fs::write(path, c.to_bytes()?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container, ContainerError> {
    Container::from_bytes(&fs::read(path)?)
}
