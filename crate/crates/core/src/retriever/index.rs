use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::DualEncoder;
use crate::tensor::{l2_norm, Mat};
use crate::{Error, Result};

pub const INDEX_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Exact,
    Approximate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Insert/query contract for vector search backends.
///
/// `insert` receives unit-norm rows; `query` receives a unit-norm vector and
/// returns at most `k` hits by descending cosine, ties by ascending id. An
/// approximate backend may miss true neighbours but must not return scores
/// outside `[-1, 1]`.
pub trait VectorSearch {
    fn insert(&mut self, id: String, unit: &[f32]) -> Result<()>;
    fn query(&self, unit_query: &[f64], k: usize) -> Vec<Hit>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unit-norm `f32` rows of student graph vectors, with their ids. The exact
/// backend ranks by brute force.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub dim: usize,
    pub ids: Vec<String>,
    /// Row-major, `ids.len() × dim`.
    pub vectors: Vec<f32>,
    pub backend: Backend,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    schema_version: u32,
    dim: usize,
    backend: Backend,
    ids: Vec<String>,
    /// Little-endian `f32`, base64.
    vectors: String,
}

fn unit_f32(v: &[f64]) -> Result<Vec<f32>> {
    let n = l2_norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateInput("cannot index a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| (x / n) as f32).collect())
}

fn by_score_then_id(a: &Hit, b: &Hit) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.id.cmp(&b.id))
}

impl RetrievalIndex {
    pub fn empty(dim: usize) -> Self {
        RetrievalIndex { dim, ids: Vec::new(), vectors: Vec::new(), backend: Backend::Exact }
    }

    /// Normalises and stores every row of `rows` under the matching id.
    pub fn from_rows(ids: Vec<String>, rows: &Mat) -> Result<Self> {
        if ids.len() != rows.rows {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), rows.rows)));
        }
        let mut index = RetrievalIndex::empty(rows.cols);
        for (r, id) in ids.into_iter().enumerate() {
            index.insert(id, &unit_f32(rows.row(r))?)?;
        }
        Ok(index)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.vectors.iter().flat_map(|x| x.to_le_bytes()).collect();
        let file =
            IndexFile { schema_version: INDEX_SCHEMA_VERSION, dim: self.dim, backend: self.backend, ids: self.ids.clone(), vectors: B64.encode(bytes) };
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: IndexFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.schema_version != INDEX_SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported index schema_version {}", file.schema_version)));
        }
        let bytes = B64.decode(file.vectors).map_err(|e| Error::Schema(format!("index vectors: {e}")))?;
        if bytes.len() != 4 * file.dim * file.ids.len() {
            return Err(Error::Schema(format!("index holds {} bytes for {} rows of dim {}", bytes.len(), file.ids.len(), file.dim)));
        }
        let vectors: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let index = RetrievalIndex { dim: file.dim, ids: file.ids, vectors, backend: file.backend };
        for i in 0..index.len() {
            let n = l2_norm(&index.row(i).iter().map(|&x| x as f64).collect::<Vec<_>>());
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Schema(format!("index row {i} has norm {n}")));
            }
        }
        Ok(index)
    }
}

impl VectorSearch for RetrievalIndex {
    fn insert(&mut self, id: String, unit: &[f32]) -> Result<()> {
        if unit.len() != self.dim {
            return Err(Error::Shape(format!("vector dim {} != index dim {}", unit.len(), self.dim)));
        }
        if self.ids.contains(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.ids.push(id);
        self.vectors.extend_from_slice(unit);
        Ok(())
    }

    fn query(&self, unit_query: &[f64], k: usize) -> Vec<Hit> {
        let mut hits: Vec<Hit> = (0..self.len())
            .map(|i| {
                let s: f64 = self.row(i).iter().zip(unit_query).map(|(&a, &b)| a as f64 * b).sum();
                Hit { id: self.ids[i].clone(), score: s.clamp(-1.0, 1.0) }
            })
            .collect();
        hits.sort_by(by_score_then_id);
        hits.truncate(k);
        hits
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Applies the student's graph tower to every embedding and indexes the
/// normalised results.
pub fn build_index(embs: &[(String, Vec<f64>)], student: &DualEncoder) -> Result<RetrievalIndex> {
    let mut seen = HashSet::new();
    if let Some((id, _)) = embs.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::DuplicateId(id.clone()));
    }
    if embs.is_empty() {
        return Ok(RetrievalIndex::empty(student.config.out_dim));
    }
    if let Some((id, e)) = embs.iter().find(|(_, e)| e.len() != student.config.graph_dim) {
        return Err(Error::Shape(format!("embedding `{id}` has dim {}, expected {}", e.len(), student.config.graph_dim)));
    }
    let g = Mat::stack_rows(&embs.iter().map(|(_, e)| Mat::row_vector(e.clone())).collect::<Vec<_>>());
    let vecs = student.encode_graphs(&g)?;
    RetrievalIndex::from_rows(embs.iter().map(|(id, _)| id.clone()).collect(), &vecs)
}

/// Top `min(k, |index|)` entries for `query` by cosine with the student's
/// text vector.
pub fn retrieve(index: &RetrievalIndex, query: &str, student: &DualEncoder, k: usize) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let q = student.encode_query(query)?;
    if q.len() != index.dim {
        return Err(Error::PipelineConfig(format!("student output dim {} != index dim {}", q.len(), index.dim)));
    }
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let n = l2_norm(&q);
    if !(n > 0.0) {
        return Err(Error::DegenerateInput("query vector has zero norm".into()));
    }
    let unit: Vec<f64> = q.iter().map(|x| x / n).collect();
    Ok(index.query(&unit, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lower_id_and_k_clamps() {
        let rows = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 2.0]]);
        let idx = RetrievalIndex::from_rows(vec!["c".into(), "b".into(), "a".into()], &rows).unwrap();
        let hits = idx.query(&[0.0, 1.0], 10);
        assert_eq!(hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(hits[0].score, 1.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let rows = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(RetrievalIndex::from_rows(vec!["x".into(), "x".into()], &rows), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn file_round_trip() {
        let rows = Mat::from_rows(&[[0.3, -0.4], [2.0, 1.0]]);
        let idx = RetrievalIndex::from_rows(vec!["p".into(), "q".into()], &rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        idx.save(&path).unwrap();
        assert_eq!(RetrievalIndex::load(&path).unwrap(), idx);
    }
}
