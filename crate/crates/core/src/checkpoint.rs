//! Versioned JSON container of named tensors plus free-form metadata.
//!
//! Backbone checkpoints and experiment checkpoints share this format. Tensor
//! names are kept in a sorted map so the serialized bytes are a pure function
//! of the contents.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorRecord};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub kind: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            version: CONTAINER_VERSION,
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), t.to_record());
    }

    pub fn insert_all<'a>(&mut self, prefix: &str, named: impl IntoIterator<Item = (String, &'a Tensor)>) {
        for (name, t) in named {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Takes a tensor out by name, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let rec = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if rec.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                rec.shape
            )));
        }
        Tensor::from_record(self.tensors.remove(name).expect("present"))
    }

    /// Restores values into existing tensors (shape-checked), by name.
    pub fn restore_into<'a>(&mut self, prefix: &str, named: impl IntoIterator<Item = (String, &'a mut Tensor)>) -> Result<()> {
        for (name, t) in named {
            let full = format!("{prefix}{name}");
            let loaded = self.take(&full, t.shape())?;
            t.data_mut().copy_from_slice(loaded.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path)?;
        let c: Container = serde_json::from_slice(&bytes)?;
        if c.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` container, found `{}`", c.kind)));
        }
        if c.version != CONTAINER_VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {}", c.version)));
        }
        Ok(c)
    }
}
