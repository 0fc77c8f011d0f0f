//! Autoencoder over backbone hidden states with a latent classifier and
//! learnable task-uncertainty weights.

use radarllm_nn::layers;
use radarllm_nn::{ParamStore, Real, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{add_dense, add_norm, dense, norm_params, seeded, Profile, NUM_CLASSES};
use crate::error::{validate, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub tokens: usize,
    pub width: usize,
    /// Encoder channel widths after the input width, e.g. `[64, 32, 16, 8]`.
    pub ladder: Vec<usize>,
    pub fc_hidden: usize,
    pub latent: usize,
    pub eps: f64,
    pub seed: u64,
}

impl AutoencoderConfig {
    pub fn profile(profile: Profile, tokens: usize) -> Self {
        let (width, ladder) = match profile {
            Profile::Desk => (128, vec![64, 32, 16, 8]),
            Profile::Full => (768, vec![512, 256, 128, 64, 32, 16]),
        };
        Self {
            tokens,
            width,
            ladder,
            fc_hidden: 64,
            latent: 20,
            eps: 1e-5,
            seed: 0,
        }
    }

    /// Decoder channel widths: the encoder ladder reversed, ending at the
    /// input width.
    pub fn decoder_ladder(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.ladder.iter().rev().skip(1).copied().collect();
        d.push(self.width);
        d
    }

    fn bottleneck(&self) -> usize {
        *self.ladder.last().unwrap_or(&self.width)
    }
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk, 55)
    }
}

#[derive(Debug, Clone)]
pub struct AutoencoderHead<T> {
    pub cfg: AutoencoderConfig,
    pub store: ParamStore<T>,
}

pub struct AeOutput {
    /// `[B, K, width]`.
    pub recon: Var,
    /// `[B, 2]`.
    pub logits: Var,
    /// `[B, latent]`.
    pub latent: Var,
}

pub struct AeLoss {
    pub total: Var,
    pub recon: Var,
    pub ce: Var,
}

pub const LOG_SIGMA_RECON: &str = "log_sigma_recon";
pub const LOG_SIGMA_CE: &str = "log_sigma_ce";

impl<T: Real> AutoencoderHead<T> {
    pub fn new(cfg: AutoencoderConfig) -> Result<Self> {
        validate(!cfg.ladder.is_empty(), || "channel ladder must not be empty".into())?;
        validate(cfg.tokens >= 1 && cfg.latent >= 1 && cfg.fc_hidden >= 1, || {
            "tokens, latent and fc_hidden must be >= 1".into()
        })?;
        let he = |n: usize| (2.0 / n as f64).sqrt();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut r = seeded(cfg.seed, 0x4145_4844);
        let mut s = ParamStore::new();
        let mut c_in = cfg.width;
        for (i, &c) in cfg.ladder.iter().enumerate() {
            add_dense(&mut s, &format!("enc.conv{i}"), c_in, c, he(c_in), true, &mut r)?;
            c_in = c;
        }
        let flat = cfg.tokens * cfg.bottleneck();
        add_dense(&mut s, "enc.fc1", flat, cfg.fc_hidden, inv(flat), true, &mut r)?;
        add_dense(&mut s, "enc.fc2", cfg.fc_hidden, cfg.latent, inv(cfg.fc_hidden), true, &mut r)?;
        add_dense(&mut s, "dec.fc1", cfg.latent, cfg.fc_hidden, inv(cfg.latent), true, &mut r)?;
        add_dense(&mut s, "dec.fc2", cfg.fc_hidden, flat, inv(cfg.fc_hidden), true, &mut r)?;
        let mut c_in = cfg.bottleneck();
        for (i, c) in cfg.decoder_ladder().into_iter().enumerate() {
            add_dense(&mut s, &format!("dec.conv{i}"), c_in, c, he(c_in), true, &mut r)?;
            c_in = c;
        }
        add_norm(&mut s, "cls.ln", cfg.latent, true)?;
        add_dense(&mut s, "cls.fc", cfg.latent, NUM_CLASSES, inv(cfg.latent), true, &mut r)?;
        s.add(LOG_SIGMA_RECON, Tensor::zeros(&[1]), true)?;
        s.add(LOG_SIGMA_CE, Tensor::zeros(&[1]), true)?;
        Ok(Self { cfg, store: s })
    }

    /// Freezes (or releases) both uncertainty parameters at their current
    /// values.
    pub fn set_sigma_trainable(&mut self, trainable: bool) -> Result<()> {
        self.store.set_trainable(LOG_SIGMA_RECON, trainable)?;
        self.store.set_trainable(LOG_SIGMA_CE, trainable)?;
        Ok(())
    }

    pub fn sigmas(&self) -> Result<(f64, f64)> {
        let get = |n: &str| -> Result<f64> { Ok(self.store.get(n)?.tensor.data()[0].to_f64_lossy().exp()) };
        Ok((get(LOG_SIGMA_RECON)?, get(LOG_SIGMA_CE)?))
    }

    pub fn forward(&self, sess: &mut Session<T>, hidden: Var) -> Result<AeOutput> {
        let (k, w) = (self.cfg.tokens, self.cfg.width);
        let b = match *sess.g.shape(hidden) {
            [b, kk, ww] if kk == k && ww == w => b,
            ref s => {
                return Err(Error::Validation(format!(
                    "autoencoder expects hidden [B, {k}, {w}], got {s:?}"
                )))
            }
        };
        let mut x = hidden;
        for i in 0..self.cfg.ladder.len() {
            x = dense(sess, &format!("enc.conv{i}"), x)?;
            x = sess.g.relu(x);
        }
        let flat = k * self.cfg.bottleneck();
        let x = sess.g.reshape(x, &[b, flat])?;
        let x = dense(sess, "enc.fc1", x)?;
        let latent = dense(sess, "enc.fc2", x)?;

        let y = dense(sess, "dec.fc1", latent)?;
        let y = dense(sess, "dec.fc2", y)?;
        let mut y = sess.g.reshape(y, &[b, k, self.cfg.bottleneck()])?;
        let n_dec = self.cfg.decoder_ladder().len();
        for i in 0..n_dec {
            y = dense(sess, &format!("dec.conv{i}"), y)?;
            if i + 1 < n_dec {
                y = sess.g.relu(y);
            }
        }

        let c = sess.g.gelu(latent);
        let (g, bt) = norm_params(sess, "cls.ln")?;
        let c = layers::feature_layer_norm(&mut sess.g, c, g, bt, self.cfg.eps)?;
        let logits = dense(sess, "cls.fc", c)?;
        Ok(AeOutput {
            recon: y,
            logits,
            latent,
        })
    }
}

/// `0.5 exp(-2a) L_recon + exp(-2b) L_ce + a + b` with `a = log sigma_recon`,
/// `b = log sigma_ce`, `L_recon` the mean squared reconstruction error and
/// `L_ce` the mean sample cross-entropy.
pub fn ae_loss<T: Real>(sess: &mut Session<T>, out: &AeOutput, hidden: Var, labels: &[usize]) -> Result<AeLoss> {
    let g = &mut sess.g;
    let diff = g.sub(out.recon, hidden)?;
    let sq = g.mul(diff, diff)?;
    let recon = g.mean(sq);
    let ce_rows = g.token_cross_entropy(out.logits, labels)?;
    let ce = g.mean(ce_rows);
    let a = sess.param(LOG_SIGMA_RECON)?;
    let b = sess.param(LOG_SIGMA_CE)?;
    let g = &mut sess.g;
    let a = g.reshape(a, &[])?;
    let b = g.reshape(b, &[])?;
    let two = T::from_f64_lossy(-2.0);
    let wa = g.scale(a, two);
    let wa = g.exp(wa);
    let t1 = g.mul(wa, recon)?;
    let t1 = g.scale(t1, T::from_f64_lossy(0.5));
    let wb = g.scale(b, two);
    let wb = g.exp(wb);
    let t2 = g.mul(wb, ce)?;
    let total = g.add(t1, t2)?;
    let total = g.add(total, a)?;
    let total = g.add(total, b)?;
    Ok(AeLoss { total, recon, ce })
}
