//! Saving and restoring the three networks as checkpoint directories whose
//! manifest carries the model config and the producing stage's hash.

use std::path::Path;

use radarllm_nn::checkpoint::Checkpoint;
use radarllm_nn::{ParamStore, Real};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AutoencoderConfig, AutoencoderHead, BackboneConfig, BackboneModel, ReferenceConfig, ReferenceModel};
use crate::error::{Error, Result};

/// Provenance stored next to the model config in a checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub stage_hash: String,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope<C> {
    #[serde(flatten)]
    meta: ModelMeta,
    config: C,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    use_lora: Option<bool>,
}

fn envelope<C: Serialize>(kind: &str, meta: &ModelMeta, config: &C, use_lora: Option<bool>) -> Result<serde_json::Value> {
    let meta = ModelMeta {
        kind: kind.to_string(),
        ..meta.clone()
    };
    Ok(serde_json::to_value(Envelope { meta, config, use_lora })?)
}

fn open<C: DeserializeOwned>(ck: &serde_json::Value, kind: &str) -> Result<Envelope<C>> {
    let env: Envelope<C> = serde_json::from_value(ck.clone())
        .map_err(|e| Error::ArtifactMismatch(format!("checkpoint manifest does not describe a {kind} model: {e}")))?;
    if env.meta.kind != kind {
        return Err(Error::ArtifactMismatch(format!(
            "expected a {kind} checkpoint, found `{}`",
            env.meta.kind
        )));
    }
    Ok(env)
}

/// Checks that `loaded` has exactly the tensors, shapes and trainable flags
/// a freshly built model would have.
fn same_layout<T: Real>(fresh: &ParamStore<T>, loaded: &ParamStore<T>) -> Result<()> {
    let sig = |s: &ParamStore<T>| -> Vec<(String, Vec<usize>, bool, bool)> {
        s.iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.trainable, p.buffer))
            .collect()
    };
    let (a, b) = (sig(fresh), sig(loaded));
    if a != b {
        let first = a
            .iter()
            .zip(&b)
            .find(|(x, y)| x != y)
            .map(|(x, y)| format!("expected {x:?}, found {y:?}"))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", a.len(), b.len()));
        return Err(Error::ArtifactMismatch(format!("checkpoint layout differs from its config: {first}")));
    }
    Ok(())
}

fn meta_of(ck: &serde_json::Value) -> Result<ModelMeta> {
    serde_json::from_value(ck.clone()).map_err(|e| Error::ArtifactMismatch(format!("checkpoint manifest lacks provenance: {e}")))
}

/// Reads only the provenance of a checkpoint directory.
pub fn checkpoint_meta<T: Real>(dir: &Path) -> Result<ModelMeta> {
    meta_of(&Checkpoint::<T>::load(dir)?.meta)
}

impl<T: Real> ReferenceModel<T> {
    pub const KIND: &'static str = "reference";

    pub fn to_checkpoint(&self, meta: &ModelMeta) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            meta: envelope(Self::KIND, meta, &self.cfg, None)?,
            store: self.store.clone(),
            extra: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<(Self, ModelMeta)> {
        let env: Envelope<ReferenceConfig> = open(&ck.meta, Self::KIND)?;
        let fresh = Self::new(env.config.clone())?;
        same_layout(&fresh.store, &ck.store)?;
        Ok((Self { cfg: env.config, store: ck.store }, env.meta))
    }

    pub fn save(&self, dir: &Path, meta: &ModelMeta) -> Result<()> {
        Ok(self.to_checkpoint(meta)?.save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelMeta)> {
        Self::from_checkpoint(Checkpoint::load(dir)?)
    }
}

impl<T: Real> BackboneModel<T> {
    pub const KIND: &'static str = "backbone";

    pub fn to_checkpoint(&self, meta: &ModelMeta) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            meta: envelope(Self::KIND, meta, &self.cfg, Some(self.use_lora))?,
            store: self.store.clone(),
            extra: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<(Self, ModelMeta)> {
        let env: Envelope<BackboneConfig> = open(&ck.meta, Self::KIND)?;
        let mut model = Self::new(env.config)?;
        same_layout(&model.store, &ck.store)?;
        model.store = ck.store;
        model.use_lora = env.use_lora.unwrap_or(true);
        Ok((model, env.meta))
    }

    pub fn save(&self, dir: &Path, meta: &ModelMeta) -> Result<()> {
        Ok(self.to_checkpoint(meta)?.save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelMeta)> {
        Self::from_checkpoint(Checkpoint::load(dir)?)
    }
}

impl<T: Real> AutoencoderHead<T> {
    pub const KIND: &'static str = "autoencoder";

    pub fn to_checkpoint(&self, meta: &ModelMeta) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            meta: envelope(Self::KIND, meta, &self.cfg, None)?,
            store: self.store.clone(),
            extra: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<(Self, ModelMeta)> {
        let env: Envelope<AutoencoderConfig> = open(&ck.meta, Self::KIND)?;
        let fresh = Self::new(env.config.clone())?;
        same_layout(&fresh.store, &ck.store)?;
        Ok((Self { cfg: env.config, store: ck.store }, env.meta))
    }

    pub fn save(&self, dir: &Path, meta: &ModelMeta) -> Result<()> {
        Ok(self.to_checkpoint(meta)?.save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelMeta)> {
        Self::from_checkpoint(Checkpoint::load(dir)?)
    }
}
