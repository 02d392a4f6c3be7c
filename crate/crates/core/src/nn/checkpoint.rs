//! Parameter checkpoints: a JSON manifest next to a blob of little-endian f32 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Real;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("parameter blob is {found} bytes, manifest says {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    byte_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Architecture, training metadata and seed; free-form.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: &str, shape: &[usize], values: &[T]) {
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend(values.iter().map(|v| v.to_f64() as f32));
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &self.data[t.offset..t.offset + t.len])
    }

    pub fn get_f64(&self, name: &str) -> Option<Vec<f64>> {
        self.get(name).map(|v| v.iter().map(|&x| x as f64).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir)?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let manifest = Manifest {
            format: "coarse2fine-checkpoint".into(),
            version: 1,
            meta: self.meta.clone(),
            tensors: self.tensors.clone(),
            byte_len: bytes.len(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(BLOB_FILE), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let bytes = fs::read(dir.join(BLOB_FILE))?;
        if bytes.len() != manifest.byte_len || bytes.len() % 4 != 0 {
            return Err(CheckpointError::Truncated {
                expected: manifest.byte_len,
                found: bytes.len(),
            });
        }
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        for t in &manifest.tensors {
            if t.offset + t.len > data.len() || t.shape.iter().product::<usize>() != t.len {
                return Err(CheckpointError::Mismatch(format!("tensor {} out of range", t.name)));
            }
        }
        Ok(Self {
            meta: manifest.meta,
            tensors: manifest.tensors,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Checkpoint::new(serde_json::json!({"seed": 3}));
        c.push("a", &[2, 2], &[1.0f32, 2.0, 3.0, 4.5]);
        c.push("b", &[1], &[-0.25f64]);
        c.save(dir.path()).unwrap();
        let l = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(l, c);
        assert_eq!(l.get("b").unwrap(), &[-0.25]);
        let blob = dir.path().join(BLOB_FILE);
        let b = fs::read(&blob).unwrap();
        fs::write(&blob, &b[..b.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(CheckpointError::Truncated { .. })));
    }
}
