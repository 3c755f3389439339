//! Versioned JSON-of-tensors container shared by every trained model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::tensor::TensorEntry;
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: String,
    pub config: Value,
    pub parameters: Vec<TensorEntry>,
    /// Named per-epoch loss series, e.g. `{"total": [...]}`.
    pub loss_trace: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub extra: Value,
}

impl Checkpoint {
    pub fn new(kind: &str, config: Value, parameters: Vec<TensorEntry>) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind: kind.to_string(),
            config,
            parameters,
            loss_trace: BTreeMap::new(),
            extra: Value::Null,
        }
    }

    pub fn with_trace(mut self, name: &str, trace: Vec<f64>) -> Self {
        self.loss_trace.insert(name.to_string(), trace);
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn from_json(text: &str, kind: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint schema_version {}", ck.schema_version)));
        }
        if ck.kind != kind {
            return Err(Error::Schema(format!("expected a `{kind}` checkpoint, found `{}`", ck.kind)));
        }
        Ok(ck)
    }

    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, kind)
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}
