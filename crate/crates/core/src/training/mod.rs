//! Reference training, token scoring, token-weighted backbone fine-tuning,
//! head retraining and the brute-force learning-value check.

mod finetune;
mod head;
mod log;
mod oracle;
mod reference;
mod scores;

pub use finetune::{batch_weights, detection_rate, finetune_backbone, FinetuneConfig, LossMode};
pub use head::{backbone_hidden, head_target_scores, train_head, HeadConfig, HeadEpoch, HeadLog};
pub use log::{EpochRecord, TrainLog};
pub use oracle::{learning_value_oracle, spearman, tiny_instance, Candidate, CandidateKind, OracleConfig, OracleOutcome, TinyInstance};
pub use reference::{train_reference, ReferenceRun};
pub use scores::{preference_loss, preference_loss_var, score_tokens, token_importance, TokenScoreTable, SCORE_MAGIC};

use rand::seq::SliceRandom;
use radarllm_nn::layers::Mode;
use radarllm_nn::optim::AdamConfig;
use radarllm_nn::{Real, Session};
use serde::{Deserialize, Serialize};

use crate::detect::aggregate_token_outputs;
use crate::error::{validate, Result};
use crate::features::FeatureTokenBatch;
use crate::models::{seeded, TokenModel};

/// Epoch budget, batch size, Adam settings and shuffle seed of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

impl StageConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate(self.batch_size >= 1, || "batch_size must be >= 1".into())?;
        validate(self.lr > 0.0 && self.lr.is_finite(), || format!("learning rate {} must be positive", self.lr))?;
        validate((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), || {
            "Adam betas must lie in [0, 1)".into()
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Seeded permutation of `0..n` for one epoch (epochs are 1-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed, 0x5348_0000 + epoch as u64));
    idx
}

/// Splits an epoch order into batches of `size`, folding a trailing
/// single-sample batch into the previous one.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size.max(1)).collect();
    if out.len() >= 2 && out[out.len() - 1].len() == 1 {
        out.pop();
        let start = order.len() - 1 - out[out.len() - 1].len();
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

/// Eval-mode target scores of every sample in `batch`, in chunks.
pub fn model_target_scores<T: Real, M: TokenModel<T>>(model: &M, batch: &FeatureTokenBatch, chunk: usize) -> Result<Vec<f64>> {
    let idx = batch.all_indices();
    let mut out = Vec::with_capacity(idx.len());
    for c in idx.chunks(chunk.max(1)) {
        let mut sess = Session::inference(model.store());
        let x = sess.g.constant(batch.tensor::<T>(c));
        let f = model.forward(&mut sess, x, Mode::Eval)?;
        out.extend(aggregate_token_outputs(sess.g.value(f.logits))?);
    }
    Ok(out)
}

/// Eval-mode per-token cross-entropy `[len * K]` of every sample, computed
/// in f64 from the model logits.
pub fn token_losses<T: Real, M: TokenModel<T>>(model: &M, batch: &FeatureTokenBatch, chunk: usize) -> Result<Vec<f64>> {
    let idx = batch.all_indices();
    let mut out = Vec::with_capacity(idx.len() * batch.k);
    for c in idx.chunks(chunk.max(1)) {
        let mut sess = Session::inference(model.store());
        let x = sess.g.constant(batch.tensor::<T>(c));
        let f = model.forward(&mut sess, x, Mode::Eval)?;
        let labels = batch.token_labels(c);
        let logits = sess.g.value(f.logits).data();
        for (t, &y) in labels.iter().enumerate() {
            out.push(token_ce(logits[2 * t].to_f64_lossy(), logits[2 * t + 1].to_f64_lossy(), y));
        }
    }
    Ok(out)
}

/// Two-class cross-entropy `-log softmax([z0, z1])[y]`.
pub fn token_ce(z0: f64, z1: f64, y: usize) -> f64 {
    let (own, other) = if y == 0 { (z0, z1) } else { (z1, z0) };
    let d = other - own;
    if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    }
}
