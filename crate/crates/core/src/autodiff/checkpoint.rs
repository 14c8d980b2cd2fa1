//! Checkpoint container: a directory holding `index.json` (name, shape,
//! dtype, byte offset per parameter) and `params.bin`, a raw little-endian
//! float64 blob. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index: {0}")]
    Index(#[from] serde_json::Error),
    #[error("parameter {name}: blob range {offset}..{end} out of bounds ({blob} bytes)")]
    BlobOutOfBounds { name: String, offset: usize, end: usize, blob: usize },
    #[error("parameter {name}: unsupported dtype {dtype:?}")]
    UnsupportedDtype { name: String, dtype: String },
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Io(_) => "io",
            CheckpointError::Index(_) => "checkpoint_index",
            CheckpointError::BlobOutOfBounds { .. } => "checkpoint_blob",
            CheckpointError::UnsupportedDtype { .. } => "checkpoint_dtype",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    params: Vec<IndexEntry>,
}

/// Writes named tensors in iteration order.
pub fn save(dir: &Path, params: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, tensor) in params {
        let offset = blob.len();
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(IndexEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
        });
    }
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let index = Index { params: entries };
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Reads a checkpoint directory back into named tensors.
pub fn load(dir: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let index: Index = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut out = BTreeMap::new();
    for entry in index.params {
        if entry.dtype != "f64" {
            return Err(CheckpointError::UnsupportedDtype { name: entry.name, dtype: entry.dtype });
        }
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + len * 8;
        if end > blob.len() {
            return Err(CheckpointError::BlobOutOfBounds {
                name: entry.name,
                offset: entry.offset,
                end,
                blob: blob.len(),
            });
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        out.insert(entry.name, Tensor::new(entry.shape, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("tonemdd-ckpt-test");
        let _ = fs::remove_dir_all(&dir);
        let a = Tensor::new(vec![2, 3], vec![1.0, -0.5, 3.25e-17, f64::MIN_POSITIVE, 2.0, 0.1]);
        let b = Tensor::new(vec![1], vec![std::f64::consts::PI]);
        save(&dir, &[("block.a".to_string(), &a), ("block.b".to_string(), &b)]).unwrap();
        let loaded = load(&dir).unwrap();
        assert_eq!(loaded.len(), 2);
        let la = &loaded["block.a"];
        assert_eq!(la.shape(), a.shape());
        for (x, y) in la.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(loaded["block.b"].data()[0].to_bits(), b.data()[0].to_bits());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = std::env::temp_dir().join("tonemdd-ckpt-trunc");
        let _ = fs::remove_dir_all(&dir);
        let a = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        save(&dir, &[("a".to_string(), &a)]).unwrap();
        fs::write(dir.join(BLOB_FILE), [0u8; 8]).unwrap();
        let err = load(&dir).unwrap_err();
        assert_eq!(err.code(), "checkpoint_blob");
    }
}
