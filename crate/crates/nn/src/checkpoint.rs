//! Checkpoint directories: `manifest.json` describing every tensor
//! (name, shape, dtype, byte offset) plus one little-endian blob
//! `tensors.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FORMAT: &str = "radarllm-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
    Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub kind: EntryKind,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Contents of a checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub store: ParamStore<T>,
    /// Non-parameter tensors: optimizer moments, normalization statistics.
    pub extra: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn extra(&self, name: &str) -> Option<&Tensor<T>> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: &str, t: &Tensor<T>, kind, trainable| {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset: blob.len() as u64,
                kind,
                trainable,
            });
            for &v in t.data() {
                v.write_le(&mut blob);
            }
        };
        for p in self.store.iter() {
            let kind = if p.buffer { EntryKind::Buffer } else { EntryKind::Param };
            push(&p.name, &p.tensor, kind, p.trainable);
        }
        for (name, t) in &self.extra {
            push(name, t, EntryKind::Extra, false);
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(BLOB), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.format != FORMAT {
            return Err(NnError::Checkpoint(format!(
                "unsupported format `{}`",
                manifest.format
            )));
        }
        let blob = fs::read(dir.join(BLOB))?;
        let mut store = ParamStore::new();
        let mut extra = Vec::new();
        for e in &manifest.tensors {
            if e.dtype != T::DTYPE {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{}` is {} but {} was requested",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * T::BYTES;
            let bytes = blob.get(start..end).ok_or_else(|| {
                NnError::Checkpoint(format!("tensor `{}` extends past end of blob", e.name))
            })?;
            let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(&e.shape, data)?;
            match e.kind {
                EntryKind::Param => {
                    store.add(e.name.clone(), t, e.trainable)?;
                }
                EntryKind::Buffer => {
                    store.add_buffer(e.name.clone(), t)?;
                }
                EntryKind::Extra => extra.push((e.name.clone(), t)),
            }
        }
        Ok(Self {
            meta: manifest.meta,
            store,
            extra,
        })
    }
}
