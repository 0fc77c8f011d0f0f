//! The three networks: reference encoder, LoRA-adapted backbone and the
//! autoencoder classification head.

mod autoencoder;
mod backbone;
mod checkpoint;
mod reference;

pub use autoencoder::{ae_loss, AeLoss, AeOutput, AutoencoderConfig, AutoencoderHead};
pub use backbone::{BackboneConfig, BackboneModel};
pub use checkpoint::{checkpoint_meta, ModelMeta};
pub use reference::{ReferenceConfig, ReferenceModel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radarllm_nn::layers::{update_running, BatchStats, Mode};
use radarllm_nn::params::ParamCount;
use radarllm_nn::{ParamStore, Real, Session, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const NUM_CLASSES: usize = 2;

/// Model profile: `desk` keeps widths small enough for CPU tests, `full`
/// uses the 768-wide backbone geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

/// Outputs of a token classifier forward pass.
pub struct ForwardOut {
    /// `[B, K, 2]` token logits.
    pub logits: Var,
    /// Post-normalization hidden states `[B, K, D]`.
    pub hidden: Var,
    /// Train-mode batch-norm statistics keyed by layer prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// A network mapping `[B, K, L]` tokens to `[B, K, 2]` logits.
pub trait TokenModel<T: Real> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// `(K, L)` the model was built for.
    fn token_shape(&self) -> (usize, usize);
    fn forward(&self, sess: &mut Session<T>, tokens: Var, mode: Mode) -> Result<ForwardOut>;

    /// Folds batch statistics from a train-mode pass into running buffers.
    fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            let store = self.store_mut();
            let mut mean = store.get(&format!("{prefix}.running_mean"))?.tensor.clone();
            let mut var = store.get(&format!("{prefix}.running_var"))?.tensor.clone();
            update_running(mean.data_mut(), var.data_mut(), s);
            store.get_mut(&format!("{prefix}.running_mean"))?.tensor = mean;
            store.get_mut(&format!("{prefix}.running_var"))?.tensor = var;
        }
        Ok(())
    }
}

/// Per-tensor parameter counts, buffers excluded.
pub fn trainable_parameter_report<T: Real>(store: &ParamStore<T>) -> Vec<ParamCount> {
    store.report()
}

/// SHA-256 over the names, shapes and bytes of every frozen parameter.
pub fn frozen_hash<T: Real>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for p in store.iter().filter(|p| !p.trainable && !p.buffer) {
        h.update(p.name.as_bytes());
        for d in p.tensor.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        let mut bytes = Vec::with_capacity(p.tensor.len() * T::BYTES);
        for v in p.tensor.data() {
            v.write_le(&mut bytes);
        }
        h.update(&bytes);
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Adds `{name}.w ~ N(0, std^2)` of shape `[din, dout]` and a zero bias.
pub(crate) fn add_dense<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    din: usize,
    dout: usize,
    std: f64,
    trainable: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.add(format!("{name}.w"), Tensor::randn(&[din, dout], std, rng), trainable)?;
    store.add(format!("{name}.b"), Tensor::zeros(&[dout]), trainable)?;
    Ok(())
}

pub(crate) fn add_norm<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, trainable: bool) -> Result<()> {
    store.add(format!("{name}.gamma"), Tensor::ones(&[d]), trainable)?;
    store.add(format!("{name}.beta"), Tensor::zeros(&[d]), trainable)?;
    Ok(())
}

pub(crate) fn dense<T: Real>(sess: &mut Session<T>, name: &str, x: Var) -> Result<Var> {
    let w = sess.param(&format!("{name}.w"))?;
    let b = sess.param(&format!("{name}.b"))?;
    Ok(radarllm_nn::layers::linear(&mut sess.g, x, w, Some(b))?)
}

pub(crate) fn norm_params<T: Real>(sess: &mut Session<T>, name: &str) -> Result<(Var, Var)> {
    Ok((sess.param(&format!("{name}.gamma"))?, sess.param(&format!("{name}.beta"))?))
}

pub(crate) fn check_tokens<T: Real>(sess: &Session<T>, tokens: Var, k: usize, l: usize) -> Result<usize> {
    match *sess.g.shape(tokens) {
        [b, kk, ll] if kk == k && ll == l => Ok(b),
        ref s => Err(crate::Error::Validation(format!(
            "model expects tokens [B, {k}, {l}], got {s:?}"
        ))),
    }
}

/// Eval-mode logits of a batch as a plain tensor.
pub fn infer_logits<T: Real, M: TokenModel<T> + ?Sized>(model: &M, tokens: Tensor<T>) -> Result<Tensor<T>> {
    let mut sess = Session::inference(model.store());
    let x = sess.g.constant(tokens);
    let out = model.forward(&mut sess, x, Mode::Eval)?;
    Ok(sess.g.value(out.logits).clone())
}
