//! Binary container for named f32 tensors plus JSON metadata.
//!
//! ```text
//! magic        8 bytes  "HRMCKPT1"
//! header_len   u64 little-endian
//! header       header_len bytes of UTF-8 JSON:
//!              {"meta": <any>, "tensors": [{"name", "shape", "offset", "len"}, ...]}
//! payload      concatenated little-endian f32 values; offsets/lengths count f32s
//! ```
//! Tensors are stored in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarmonError, Result};

const MAGIC: &[u8; 8] = b"HRMCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

impl TensorContainer {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), TensorRecord { shape, data });
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(HarmonError::invalid_data(format!("tensor {name}: shape/data mismatch")));
            }
            index.push(IndexEntry { name: name.clone(), shape: t.shape.clone(), offset, len: t.data.len() });
            offset += t.data.len();
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: index })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HarmonError::invalid_data(format!("checkpoint container: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(bad(&format!("tensor {} shape/len mismatch", e.name)));
            }
            let start = e.offset * 4;
            let end = start + e.len * 4;
            if end > payload.len() {
                return Err(bad(&format!("tensor {} out of bounds", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(e.name, TensorRecord { shape: e.shape, data });
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                HarmonError::MissingArtifact(format!("no checkpoint at {}", path.display()))
            } else {
                e.into()
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut c = TensorContainer { meta: serde_json::json!({"iteration": 3}), ..Default::default() };
        c.insert("b", vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 4.0]);
        c.insert("a", vec![0], vec![]);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(TensorContainer::from_bytes(&bytes).unwrap(), c);
        assert!(TensorContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorContainer::from_bytes(b"NOTACKPT........").is_err());
    }
}
