//! Single-file tensor archive used for checkpoints and pretrained weights.
//!
//! Layout: the 8-byte magic `PEFCKPT1`, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian `f64` data of every tensor in
//! header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PEFCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn take(&mut self, path: &Path, name: &str) -> Result<ArrayD<f64>> {
        self.tensors.remove(name).ok_or_else(|| corrupt(path, format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header { tensors: entries, meta: self.meta.clone() })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Writes atomically via a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a tensor archive (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start =
            16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            let lo = e.offset * 8;
            let hi = lo + len * 8;
            if hi > data.len() {
                return Err(corrupt(path, format!("tensor `{}` runs past end of file", e.name)));
            }
            let values: Vec<f64> =
                data[lo..hi].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| corrupt(path, err.to_string()))?;
            tensors.insert(e.name, arr);
        }
        Ok(Self { meta: header.meta, tensors })
    }
}
