//! Brute-force check that token importance scores rank candidate patches by
//! how much training on them lowers held-out loss.

use rand::Rng;
use rand_distr::StandardNormal;
use radarllm_nn::layers::Mode;
use radarllm_nn::optim::Adam;
use radarllm_nn::Session;
use serde::{Deserialize, Serialize};

use super::{token_importance, token_losses};
use crate::data::Label;
use crate::error::{validate, Error, Result};
use crate::features::{FeatureKind, FeatureTokenBatch, TokenOrigin};
use crate::models::{seeded, ReferenceConfig, ReferenceModel, TokenModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub model: ReferenceConfig,
    pub alpha: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub retrain_steps: usize,
    pub retrain_lr: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            model: ReferenceConfig {
                tokens: 5,
                patch_len: 8,
                d_model: 8,
                heads: 2,
                layers: 1,
                ffn_hidden: 16,
                head_hidden: 8,
                eps: 1e-5,
                seed: 0,
            },
            alpha: 0.9,
            pretrain_steps: 150,
            pretrain_lr: 1e-2,
            retrain_steps: 20,
            retrain_lr: 0.1,
        }
    }
}

/// One candidate patch: token `token` of sample `sample` of the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub sample: usize,
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleOutcome {
    /// Importance score of each candidate under the starting model.
    pub scores: Vec<f64>,
    /// Test loss without the candidate minus test loss with it.
    pub reductions: Vec<f64>,
    pub spearman: f64,
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    validate(a.len() == b.len() && a.len() >= 2, || "spearman needs two equal series of length >= 2".into())?;
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Full-batch weighted token cross-entropy `sum(w * L) / denom` and its
/// gradients.
fn weighted_step(
    model: &ReferenceModel<f64>,
    batch: &FeatureTokenBatch,
    weights: &[f64],
    denom: f64,
) -> Result<(f64, radarllm_nn::Gradients<f64>, Vec<(String, radarllm_nn::layers::BatchStats)>)> {
    let idx = batch.all_indices();
    let mut sess = Session::new(&model.store);
    let x = sess.g.constant(batch.tensor::<f64>(&idx));
    let out = model.forward(&mut sess, x, Mode::Train)?;
    let ce = sess.g.token_cross_entropy(out.logits, &batch.token_labels(&idx))?;
    let wce = sess.g.mul_const(ce, weights)?;
    let s = sess.g.sum(wce);
    let loss = sess.g.scale(s, 1.0 / denom);
    let value = sess.g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("oracle loss {value}")));
    }
    Ok((value, sess.backward(loss)?, out.bn_stats))
}

fn pretrain(cfg: &OracleConfig, seed: u64, data: &FeatureTokenBatch) -> Result<ReferenceModel<f64>> {
    let mut model = ReferenceModel::<f64>::new(ReferenceConfig { seed, ..cfg.model.clone() })?;
    let mut adam = Adam::new(radarllm_nn::optim::AdamConfig {
        lr: cfg.pretrain_lr,
        ..Default::default()
    });
    let w = vec![1.0; data.len() * data.k];
    for _ in 0..cfg.pretrain_steps {
        let (_, g, stats) = weighted_step(&model, data, &w, w.len() as f64)?;
        adam.step(&mut model.store, &g)?;
        model.apply_bn_stats(&stats)?;
    }
    Ok(model)
}

fn mean_loss(model: &ReferenceModel<f64>, data: &FeatureTokenBatch) -> Result<f64> {
    let l = token_losses(model, data, 64)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Gradient-descent retraining from `start` on `train` plus the pool, where
/// pool tokens carry `pool_weights` and the loss is normalized by the train
/// token count. Returns the final test loss.
fn retrain_test_loss(
    cfg: &OracleConfig,
    start: &ReferenceModel<f64>,
    joint: &FeatureTokenBatch,
    weights: &[f64],
    denom: f64,
    test: &FeatureTokenBatch,
) -> Result<f64> {
    let mut model = start.clone();
    for _ in 0..cfg.retrain_steps {
        let (_, g, stats) = weighted_step(&model, joint, weights, denom)?;
        for i in 0..model.store.len() {
            let p = model.store.by_index_mut(i);
            if let (true, Some(gr)) = (p.trainable, g.get(i)) {
                p.tensor.data_mut().iter_mut().zip(gr).for_each(|(w, d)| *w -= cfg.retrain_lr * d);
            }
        }
        model.apply_bn_stats(&stats)?;
    }
    mean_loss(&model, test)
}

/// Scores each candidate with a model trained on `train` and a reference
/// trained on `validation`, measures its brute-force test-loss reduction and
/// returns the rank correlation between the two.
pub fn learning_value_oracle(
    train: &FeatureTokenBatch,
    validation: &FeatureTokenBatch,
    test: &FeatureTokenBatch,
    pool: &FeatureTokenBatch,
    candidates: &[Candidate],
    cfg: &OracleConfig,
) -> Result<OracleOutcome> {
    validate(candidates.len() >= 5, || format!("need at least 5 candidates, got {}", candidates.len()))?;
    validate(train.len() + pool.len() <= 40, || {
        format!("tiny instance limited to 40 training samples, got {}", train.len() + pool.len())
    })?;
    validate(cfg.model.d_model <= 16, || "tiny instance limited to width 16".into())?;
    for c in candidates {
        validate(c.sample < pool.len() && c.token < pool.k, || format!("candidate {c:?} outside the pool"))?;
    }
    if train.is_empty() || validation.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput("oracle needs train, validation and test samples".into()));
    }
    let start = pretrain(cfg, cfg.model.seed, train)?;
    let reference = pretrain(cfg, cfg.model.seed.wrapping_add(1), validation)?;

    let lt = token_losses(&start, pool, 64)?;
    let lr = token_losses(&reference, pool, 64)?;
    let s_all = token_importance(&lt, &lr, cfg.alpha)?;
    let scores: Vec<f64> = candidates.iter().map(|c| s_all[c.sample * pool.k + c.token]).collect();

    let mut joint = train.clone();
    joint.extend(pool)?;
    let base_len = train.len() * train.k;
    let denom = base_len as f64;
    let mut weights = vec![1.0; base_len];
    weights.extend(std::iter::repeat_n(0.0, pool.len() * pool.k));
    let excluded = retrain_test_loss(cfg, &start, &joint, &weights, denom, test)?;
    let mut reductions = Vec::with_capacity(candidates.len());
    for c in candidates {
        let j = base_len + c.sample * pool.k + c.token;
        weights[j] = 1.0;
        let included = retrain_test_loss(cfg, &start, &joint, &weights, denom, test)?;
        weights[j] = 0.0;
        reductions.push(excluded - included);
    }
    let spearman = spearman(&scores, &reductions)?;
    Ok(OracleOutcome {
        scores,
        reductions,
        spearman,
    })
}

/// Kind of a synthetic oracle candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateKind {
    /// Informative token drawn like the test set.
    TestLike,
    /// Noise token with a random label.
    Noise,
    /// Spurious token drawn like the training set.
    TrainLike,
}

/// A tiny synthetic instance where the training set carries a spurious cue
/// that the test set lacks.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub train: FeatureTokenBatch,
    pub validation: FeatureTokenBatch,
    pub test: FeatureTokenBatch,
    pub pool: FeatureTokenBatch,
    pub candidates: Vec<Candidate>,
    pub kinds: Vec<CandidateKind>,
}

#[derive(Clone, Copy)]
enum Draw {
    /// Token 0 uninformative, token 1 tracks the label.
    Spurious,
    /// Token 0 tracks the label, token 1 carries no cue.
    Informative,
    /// No token tracks the label.
    Noise,
}

pub fn tiny_instance(seed: u64, per_kind: usize, k: usize, l: usize, signal: f64) -> Result<TinyInstance> {
    validate(k >= 2 && l >= 1, || "tiny instance needs K >= 2".into())?;
    let mut rng = seeded(seed, 0x4f52_4143);
    let pattern = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..l).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    };
    let u = pattern(&mut rng);
    let v = pattern(&mut rng);
    let origin: Vec<TokenOrigin> = (0..k)
        .map(|p| TokenOrigin {
            feature: FeatureKind::Ip,
            patch: p,
        })
        .collect();
    let mut next_id = 0u64;
    let mut draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, how: Draw| -> FeatureTokenBatch {
        let mut b = FeatureTokenBatch::empty(k, l, [k * l, 0, 0, 0, 0], origin.clone());
        for i in 0..n {
            let label = if i % 2 == 0 { Label::Target } else { Label::Clutter };
            let sign = if label == Label::Target { 1.0 } else { -1.0 };
            let (a0, a1) = match how {
                Draw::Spurious => (0.0, sign),
                Draw::Informative => (sign, 0.0),
                Draw::Noise => (0.0, 0.0),
            };
            for t in 0..k {
                for j in 0..l {
                    let noise: f64 = rng.sample(StandardNormal);
                    let cue = match t {
                        0 => a0 * u[j],
                        1 => a1 * v[j],
                        _ => 0.0,
                    };
                    b.tokens.push(signal * cue + noise);
                }
            }
            let label = match how {
                Draw::Noise if rng.random::<bool>() => Label::Target,
                Draw::Noise => Label::Clutter,
                _ => label,
            };
            b.labels.push(label);
            b.sample_ids.push(next_id);
            next_id += 1;
        }
        b
    };
    let train = draw(&mut rng, 16, Draw::Spurious);
    let validation = draw(&mut rng, 16, Draw::Informative);
    let test = draw(&mut rng, 32, Draw::Informative);
    let mut pool = draw(&mut rng, per_kind, Draw::Informative);
    pool.extend(&draw(&mut rng, per_kind, Draw::Noise))?;
    pool.extend(&draw(&mut rng, per_kind, Draw::Spurious))?;
    let mut candidates = Vec::new();
    let mut kinds = Vec::new();
    for (g, kind, token) in [(0, CandidateKind::TestLike, 0), (1, CandidateKind::Noise, 0), (2, CandidateKind::TrainLike, 1)] {
        for i in 0..per_kind {
            candidates.push(Candidate {
                sample: g * per_kind + i,
                token,
            });
            kinds.push(kind);
        }
    }
    Ok(TinyInstance {
        train,
        validation,
        test,
        pool,
        candidates,
        kinds,
    })
}
