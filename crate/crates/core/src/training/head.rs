use std::path::Path;

use radarllm_nn::layers::Mode;
use radarllm_nn::optim::Adam;
use radarllm_nn::{Real, Session, Tensor};
use serde::{Deserialize, Serialize};

use super::{batches, epoch_order, StageConfig};
use crate::detect::target_probability;
use crate::error::{validate, Error, Result};
use crate::features::FeatureTokenBatch;
use crate::models::{ae_loss, AutoencoderHead, BackboneModel, TokenModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub stage: StageConfig,
    /// Learn the two uncertainty parameters; when false they stay at their
    /// current values.
    pub learn_sigma: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            stage: StageConfig::new(50, 16, 1e-5, 0),
            learn_sigma: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub ce: f64,
    pub sigma_recon: f64,
    pub sigma_ce: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadLog {
    pub epochs: Vec<HeadEpoch>,
}

impl HeadLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        w.write_record(["epoch", "total", "recon", "ce", "sigma_recon", "sigma_ce"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.total.to_string(),
                e.recon.to_string(),
                e.ce.to_string(),
                e.sigma_recon.to_string(),
                e.sigma_ce.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Eval-mode backbone hidden states `[len, K, width]` of every sample.
pub fn backbone_hidden<T: Real>(backbone: &BackboneModel<T>, batch: &FeatureTokenBatch) -> Result<Tensor<T>> {
    let idx = batch.all_indices();
    let mut data = Vec::with_capacity(idx.len() * batch.k * backbone.cfg.width);
    for c in idx.chunks(64) {
        let mut sess = Session::inference(&backbone.store);
        let x = sess.g.constant(batch.tensor::<T>(c));
        let out = backbone.forward(&mut sess, x, Mode::Eval)?;
        data.extend_from_slice(sess.g.value(out.hidden).data());
    }
    Ok(Tensor::new(&[idx.len(), batch.k, backbone.cfg.width], data)?)
}

/// Target-class probability of the autoencoder classifier per sample.
pub fn head_target_scores<T: Real>(backbone: &BackboneModel<T>, head: &AutoencoderHead<T>, batch: &FeatureTokenBatch) -> Result<Vec<f64>> {
    let hidden = backbone_hidden(backbone, batch)?;
    let idx = batch.all_indices();
    let mut out = Vec::with_capacity(idx.len());
    for c in idx.chunks(64) {
        let mut sess = Session::inference(&head.store);
        let h = sess.g.constant(hidden.select_rows(c));
        let o = head.forward(&mut sess, h)?;
        let z = sess.g.value(o.logits).data();
        out.extend(z.chunks(2).map(|p| target_probability(p[0].to_f64_lossy(), p[1].to_f64_lossy())));
    }
    Ok(out)
}

/// Retrains the autoencoder head on cached hidden states of a frozen
/// backbone with uncertainty-weighted reconstruction and classification.
pub fn train_head<T: Real>(
    backbone: &BackboneModel<T>,
    head: &mut AutoencoderHead<T>,
    train: &FeatureTokenBatch,
    cfg: &HeadConfig,
) -> Result<HeadLog> {
    cfg.stage.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("head training needs samples".into()));
    }
    validate(
        head.cfg.tokens == train.k && head.cfg.width == backbone.cfg.width,
        || format!(
            "head expects {}x{} hidden states, backbone gives {}x{}",
            head.cfg.tokens, head.cfg.width, train.k, backbone.cfg.width
        ),
    )?;
    head.set_sigma_trainable(cfg.learn_sigma)?;
    let hidden = backbone_hidden(backbone, train)?;
    let labels: Vec<usize> = train.labels.iter().map(|l| l.class_index()).collect();
    let mut adam = Adam::new(cfg.stage.adam());
    let mut log = HeadLog::default();
    for epoch in 1..=cfg.stage.epochs {
        let order = epoch_order(train.len(), cfg.stage.seed ^ 0x4845_4144, epoch);
        let (mut total, mut recon, mut ce, mut seen) = (0.0, 0.0, 0.0, 0.0);
        for idx in batches(&order, cfg.stage.batch_size) {
            let grads = {
                let mut sess = Session::new(&head.store);
                let h = sess.g.constant(hidden.select_rows(idx));
                let out = head.forward(&mut sess, h)?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let l = ae_loss(&mut sess, &out, h, &y)?;
                let v = |x| sess.g.value(x).data()[0].to_f64_lossy();
                let (t, r, c) = (v(l.total), v(l.recon), v(l.ce));
                if !t.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("head loss {t}"),
                    });
                }
                let n = idx.len() as f64;
                total += t * n;
                recon += r * n;
                ce += c * n;
                seen += n;
                sess.backward(l.total)?
            };
            adam.step(&mut head.store, &grads).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
            let (a, b) = head.sigmas()?;
            if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("uncertainty weights became ({a}, {b})"),
                });
            }
        }
        let (sigma_recon, sigma_ce) = head.sigmas()?;
        log.epochs.push(HeadEpoch {
            epoch,
            total: total / seen,
            recon: recon / seen,
            ce: ce / seen,
            sigma_recon,
            sigma_ce,
        });
    }
    Ok(log)
}
