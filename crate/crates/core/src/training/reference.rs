use radarllm_nn::layers::Mode;
use radarllm_nn::optim::Adam;
use radarllm_nn::{Real, Session};

use super::{batches, epoch_order, token_losses, StageConfig};
use crate::error::{Error, Result};
use crate::features::FeatureTokenBatch;
use crate::models::{ReferenceConfig, ReferenceModel, TokenModel};

#[derive(Debug, Clone)]
pub struct ReferenceRun<T> {
    pub model: ReferenceModel<T>,
    /// Entry 0 is the eval-mode token cross-entropy before training; entry
    /// `e` is the mean train-mode batch loss of epoch `e`.
    pub history: Vec<f64>,
    /// Eval-mode mean token cross-entropy on the training set after the
    /// last epoch.
    pub final_ce: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains a fresh reference model on `validation` with per-token
/// cross-entropy against broadcast sample labels.
pub fn train_reference<T: Real>(cfg: &ReferenceConfig, stage: &StageConfig, validation: &FeatureTokenBatch) -> Result<ReferenceRun<T>> {
    stage.validate()?;
    if validation.len() < 2 {
        return Err(Error::EmptyInput("reference training needs at least 2 validation samples".into()));
    }
    if (validation.k, validation.l) != (cfg.tokens, cfg.patch_len) {
        return Err(Error::Validation(format!(
            "tokens are {}x{} but the reference model expects {}x{}",
            validation.k, validation.l, cfg.tokens, cfg.patch_len
        )));
    }
    let mut model = ReferenceModel::<T>::new(cfg.clone())?;
    let mut adam = Adam::new(stage.adam());
    let mut history = vec![mean(&token_losses(&model, validation, 64)?)];
    for epoch in 1..=stage.epochs {
        let order = epoch_order(validation.len(), stage.seed, epoch);
        let mut losses = Vec::new();
        for idx in batches(&order, stage.batch_size) {
            let (grads, loss, stats) = {
                let mut sess = Session::new(&model.store);
                let x = sess.g.constant(validation.tensor::<T>(idx));
                let out = model.forward(&mut sess, x, Mode::Train)?;
                let ce = sess.g.token_cross_entropy(out.logits, &validation.token_labels(idx))?;
                let loss = sess.g.mean(ce);
                let value = sess.g.value(loss).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("reference loss {value}"),
                    });
                }
                (sess.backward(loss)?, value, out.bn_stats)
            };
            adam.step(&mut model.store, &grads).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
            model.apply_bn_stats(&stats)?;
            losses.push(loss);
        }
        history.push(mean(&losses));
        log::debug!("reference epoch {epoch}: loss {:.5}", history[epoch]);
    }
    let final_ce = mean(&token_losses(&model, validation, 64)?);
    Ok(ReferenceRun { model, history, final_ce })
}
