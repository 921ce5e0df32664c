//! Flat named-tensor archive.
//!
//! Layout: the 8-byte magic `FFNCKPT1`, a little-endian `u64` giving the byte length of a
//! JSON index, the index itself, then every tensor's values as consecutive little-endian
//! `f64`s in index order. The index is `{"meta": <any>, "entries": [{"name", "dims",
//! "offset", "len"}]}` with `offset`/`len` counted in values, not bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FFNCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, tensors: BTreeMap<String, Tensor>) -> Self {
        Checkpoint { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                dims: t.dims().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
        }
        let index = serde_json::to_vec(&Index {
            meta: self.meta.clone(),
            entries,
        })?;
        let mut out = Vec::with_capacity(16 + index.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        for t in self.tensors.values() {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing archive magic"));
        }
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(index_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated index"))?;
        let index: Index = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        if !data.len().is_multiple_of(8) {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let mut tensors = BTreeMap::new();
        for e in index.entries {
            let end = (e.offset + e.len) * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` runs past end of data",
                    e.name
                )));
            }
            let values = data[e.offset * 8..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::new(e.dims, values)?);
        }
        Ok(Checkpoint {
            meta: index.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a".to_string(),
            Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        tensors.insert(
            "b.bias".to_string(),
            Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(),
        );
        let ck = Checkpoint::new(serde_json::json!({"mode": "frozen", "stage": 1}), tensors);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        for (k, t) in &ck.tensors {
            let u = &back.tensors[k];
            assert_eq!(t.dims(), u.dims());
            let bits = |x: &Tensor| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(u));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint::new(serde_json::json!(null), BTreeMap::new());
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
