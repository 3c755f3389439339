use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Mat;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors owned by one model.
///
/// Each store carries a process-unique id so a [`super::Tape`] can tell
/// parameters of different models apart and decide which ones are trainable.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Mat>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

/// Serialized form of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed), names: Vec::new(), values: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Snapshot of every parameter whose name passes `keep`.
    pub fn entries_where(&self, keep: impl Fn(&str) -> bool) -> Vec<TensorEntry> {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| keep(n))
            .map(|(n, m)| TensorEntry { name: n.clone(), shape: [m.rows, m.cols], data: m.data.clone() })
            .collect()
    }

    pub fn entries(&self) -> Vec<TensorEntry> {
        self.entries_where(|_| true)
    }

    /// Overwrites parameters by name. Every entry must name an existing
    /// parameter with a matching shape; parameters without an entry keep
    /// their current value.
    pub fn load_entries(&mut self, entries: &[TensorEntry]) -> Result<(), String> {
        for e in entries {
            let id = self.find(&e.name).ok_or_else(|| format!("unknown parameter `{}`", e.name))?;
            let cur = &mut self.values[id.0];
            if [cur.rows, cur.cols] != e.shape || e.data.len() != e.shape[0] * e.shape[1] {
                return Err(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    e.name,
                    [cur.rows, cur.cols],
                    e.shape
                ));
            }
            cur.data.copy_from_slice(&e.data);
        }
        Ok(())
    }

    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "copy_values_from: layout mismatch");
        self.values.clone_from(&other.values);
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, m) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for x in &m.data {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
