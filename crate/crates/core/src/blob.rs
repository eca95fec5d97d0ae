//! Named f64 tensors stored as `<stem>.bin` (little-endian, concatenated)
//! plus a `<stem>.json` shape manifest.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NodfError, Result};

pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobManifest {
    pub version: u32,
    pub tensors: Vec<BlobEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBlob {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl TensorBlob {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a matrix in column-major order with shape [rows, cols].
    pub fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.tensors
            .push((name.to_string(), vec![m.nrows(), m.ncols()], m.as_slice().to_vec()));
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.to_string(), shape, data));
    }

    pub fn get(&self, name: &str) -> Result<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors
            .iter()
            .find(|t| t.0 == name)
            .ok_or_else(|| NodfError::Parse(format!("tensor {name:?} missing from blob")))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (_, shape, data) = self.get(name)?;
        if shape.len() != 2 {
            return Err(NodfError::Parse(format!("tensor {name:?} has rank {}", shape.len())));
        }
        Ok(DMatrix::from_column_slice(shape[0], shape[1], data))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = BlobManifest {
            version: BLOB_VERSION,
            tensors: self
                .tensors
                .iter()
                .map(|(n, s, _)| BlobEntry {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
        let total: usize = self.tensors.iter().map(|t| t.2.len()).sum();
        let mut bytes = Vec::with_capacity(total * 8);
        for (_, _, data) in &self.tensors {
            for x in data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let bin = dir.join(format!("{stem}.bin"));
        for p in [&json, &bin] {
            if !p.exists() {
                return Err(NodfError::MissingComponent(p.clone()));
            }
        }
        let manifest: BlobManifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
        if manifest.version != BLOB_VERSION {
            return Err(NodfError::SchemaVersion {
                found: manifest.version,
                expected: BLOB_VERSION,
            });
        }
        let bytes = fs::read(&bin)?;
        let expected: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if bytes.len() != expected * 8 {
            return Err(NodfError::Parse(format!(
                "{} holds {} bytes, manifest expects {}",
                bin.display(),
                bytes.len(),
                expected * 8
            )));
        }
        let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let tensors = manifest
            .tensors
            .into_iter()
            .map(|e| {
                let n = e.shape.iter().product();
                let data: Vec<f64> = values.by_ref().take(n).collect();
                (e.name, e.shape, data)
            })
            .collect();
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut b = TensorBlob::new();
        b.push_matrix("a", &DMatrix::from_fn(3, 2, |i, j| (i * 10 + j) as f64 + 0.1));
        b.push("t", vec![2, 2, 2], (0..8).map(|x| x as f64).collect());
        b.meta = serde_json::json!({"k": 1});
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path(), "x").unwrap();
        let back = TensorBlob::load(dir.path(), "x").unwrap();
        assert_eq!(back, b);
        assert_eq!(back.matrix("a").unwrap()[(2, 1)], 21.1);
        assert!(back.matrix("t").is_err());
        assert!(TensorBlob::load(dir.path(), "y").is_err());
    }
}
