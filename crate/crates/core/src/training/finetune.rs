use radarllm_nn::layers::Mode;
use radarllm_nn::optim::Adam;
use radarllm_nn::{Real, Session};
use serde::{Deserialize, Serialize};

use super::{batches, epoch_order, model_target_scores, preference_loss_var, token_importance, EpochRecord, StageConfig, TokenScoreTable, TrainLog};
use crate::data::Label;
use crate::detect::{evaluate, ScoredSample};
use crate::error::{validate, Error, Result};
use crate::features::FeatureTokenBatch;
use crate::models::{frozen_hash, BackboneModel, TokenModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Tokens weighted by `max(L_t - alpha L_r, 0)`.
    Preference,
    /// Every token weighted 1.
    PlainCe,
    /// Every token of a sample weighted by
    /// `max(mean_k L_t - alpha mean_k L_r, 0)`.
    WeightedCeSample,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preference" => Ok(LossMode::Preference),
            "plain_ce" => Ok(LossMode::PlainCe),
            "weighted_ce_sample" => Ok(LossMode::WeightedCeSample),
            _ => Err(Error::Validation(format!(
                "unknown loss mode `{s}` (expected preference, plain_ce or weighted_ce_sample)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub stage: StageConfig,
    pub alpha: f64,
    pub loss_mode: LossMode,
    /// Requested false-alarm rate for the per-epoch evaluation.
    pub eval_pfa: f64,
    /// Stop after this many epochs without a better evaluation detection
    /// rate and restore the best trainable weights.
    pub early_stop_patience: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            stage: StageConfig::new(50, 16, 1e-4, 0),
            alpha: 0.9,
            loss_mode: LossMode::Preference,
            eval_pfa: 0.01,
            early_stop_patience: None,
        }
    }
}

/// Per-token training weights `[B * K]` of one batch.
pub fn batch_weights(mode: LossMode, target: &[f64], reference: &[f64], alpha: f64, k: usize) -> Result<Vec<f64>> {
    validate(k >= 1 && target.len() % k == 0, || format!("{} losses do not split into rows of {k}", target.len()))?;
    match mode {
        LossMode::Preference => token_importance(target, reference, alpha),
        LossMode::PlainCe => Ok(vec![1.0; target.len()]),
        LossMode::WeightedCeSample => {
            let tok = token_importance(target, reference, 0.0)?;
            let mut out = Vec::with_capacity(target.len());
            for (t, r) in tok.chunks(k).zip(reference.chunks(k)) {
                let mt = t.iter().sum::<f64>() / k as f64;
                let mr = r.iter().sum::<f64>() / k as f64;
                out.extend(std::iter::repeat_n((mt - alpha * mr).max(0.0), k));
            }
            Ok(out)
        }
    }
}

/// Detection rate of `model` on `eval` at the requested false-alarm rate.
pub fn detection_rate<T: Real, M: TokenModel<T>>(model: &M, eval: &FeatureTokenBatch, pfa: f64) -> Result<f64> {
    let scores = model_target_scores(model, eval, 64)?;
    let samples: Vec<ScoredSample> = scores
        .iter()
        .zip(&eval.labels)
        .zip(&eval.sample_ids)
        .map(|((&score, &label), &sample_id)| ScoredSample { sample_id, label, score })
        .collect();
    Ok(evaluate(&samples, pfa, "backbone", "")?.detection_rate)
}

/// Fine-tunes the trainable subset of `model` on `train` with token weights
/// from `table`, returning the per-epoch log.
pub fn finetune_backbone<T: Real>(
    model: &mut BackboneModel<T>,
    train: &FeatureTokenBatch,
    table: &TokenScoreTable,
    cfg: &FinetuneConfig,
    eval: Option<&FeatureTokenBatch>,
) -> Result<TrainLog> {
    cfg.stage.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("fine-tuning needs training samples".into()));
    }
    validate(table.k == train.k, || format!("score table has K = {}, tokens have K = {}", table.k, train.k))?;
    if let Some(e) = eval {
        validate(
            e.labels.contains(&Label::Target) && e.labels.contains(&Label::Clutter),
            || "evaluation set needs both classes".into(),
        )?;
    }
    let reference = table.lookup(&train.sample_ids)?;
    let k = train.k;
    let before = frozen_hash(&model.store);
    let mut adam = Adam::new(cfg.stage.adam());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<T>)> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.stage.epochs {
        let order = epoch_order(train.len(), cfg.stage.seed, epoch);
        let (mut loss_sum, mut weight_sum, mut zeros, mut tokens) = (0.0, 0.0, 0usize, 0usize);
        let mut per_token = vec![0.0; k];
        for idx in batches(&order, cfg.stage.batch_size) {
            let lr: Vec<f64> = idx.iter().flat_map(|&i| reference[i * k..(i + 1) * k].iter().copied()).collect();
            let grads = {
                let mut sess = Session::new(&model.store);
                let x = sess.g.constant(train.tensor::<T>(idx));
                let out = model.forward(&mut sess, x, Mode::Train)?;
                let ce = sess.g.token_cross_entropy(out.logits, &train.token_labels(idx))?;
                let lt: Vec<f64> = sess.g.value(ce).data().iter().map(|v| v.to_f64_lossy()).collect();
                if lt.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        detail: "non-finite token loss".into(),
                    });
                }
                let w = batch_weights(cfg.loss_mode, &lt, &lr, cfg.alpha, k)?;
                let loss = preference_loss_var(&mut sess, ce, &w)?;
                let value = sess.g.value(loss).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("loss {value}"),
                    });
                }
                loss_sum += lt.iter().sum::<f64>();
                weight_sum += w.iter().sum::<f64>();
                zeros += w.iter().filter(|&&v| v == 0.0).count();
                tokens += w.len();
                for row in w.chunks(k) {
                    per_token.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                sess.backward(loss)?
            };
            adam.step(&mut model.store, &grads).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
        }
        let eval_dr = match eval {
            Some(e) => Some(detection_rate(model, e, cfg.eval_pfa)?),
            None => None,
        };
        let n = train.len() as f64;
        log.push(EpochRecord {
            epoch,
            mean_target_loss: loss_sum / tokens as f64,
            mean_importance: weight_sum / tokens as f64,
            zero_score_fraction: zeros as f64 / tokens as f64,
            eval_detection_rate: eval_dr,
            token_weights: per_token.iter().map(|v| v / n).collect(),
        })?;
        log::debug!(
            "finetune epoch {epoch}: target loss {:.5}, dr {eval_dr:?}",
            loss_sum / tokens as f64
        );
        if let (Some(patience), Some(dr)) = (cfg.early_stop_patience, eval_dr) {
            if best.as_ref().is_none_or(|(b, _)| dr > *b) {
                best = Some((dr, model.store.trainable_values()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, values)) = best {
        model.store.set_trainable_values(&values);
    }
    let after = frozen_hash(&model.store);
    if before != after {
        return Err(Error::FrozenMutated { before, after });
    }
    Ok(log)
}
