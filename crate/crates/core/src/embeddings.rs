//! Embedding container: a row-major little-endian `f32` matrix in one file
//! and a JSON sidecar (`<file>.ids.json`) with the row ids and shape.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;
use crate::{Error, Result};

pub const EMBEDDINGS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub dim: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema_version: u32,
    rows: usize,
    dim: usize,
    ids: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

impl EmbeddingTable {
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Shape(format!("row of length {} in a table of dim {dim}", r.len())));
        }
        Ok(EmbeddingTable { ids, dim, data: rows.iter().flatten().map(|&x| x as f32).collect() })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data[i * self.dim..(i + 1) * self.dim].iter().map(|&x| x as f64).collect()
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.len(), self.dim, self.data.iter().map(|&x| x as f64).collect())
    }

    /// `(id, vector)` pairs in row order.
    pub fn entries(&self) -> Vec<(String, Vec<f64>)> {
        (0..self.len()).map(|i| (self.ids[i].clone(), self.row(i))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        let side = Sidecar { schema_version: EMBEDDINGS_SCHEMA_VERSION, rows: self.len(), dim: self.dim, ids: self.ids.clone() };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if side.schema_version != EMBEDDINGS_SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported embeddings schema_version {}", side.schema_version)));
        }
        let bytes = fs::read(path)?;
        if side.ids.len() != side.rows || bytes.len() != 4 * side.rows * side.dim {
            return Err(Error::Schema(format!("{} holds {} bytes, sidecar says {} x {}", path.display(), bytes.len(), side.rows, side.dim)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(EmbeddingTable { ids: side.ids, dim: side.dim, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_shape_check() {
        let t = EmbeddingTable::from_rows(vec!["a".into(), "b".into()], &[vec![1.0, 0.5], vec![-2.0, 0.25]], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("embs.f32");
        t.save(&p).unwrap();
        assert_eq!(EmbeddingTable::load(&p).unwrap(), t);
        fs::write(&p, [0u8; 4]).unwrap();
        assert!(matches!(EmbeddingTable::load(&p), Err(Error::Schema(_))));
    }
}
