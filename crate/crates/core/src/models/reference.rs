//! Lightweight patch encoder trained only on validation data.

use radarllm_nn::layers::{self, AttentionWeights, Mode, Projection};
use radarllm_nn::{ParamStore, Real, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{add_dense, add_norm, check_tokens, dense, norm_params, seeded, ForwardOut, TokenModel, NUM_CLASSES};
use crate::error::{validate, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub tokens: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            tokens: 55,
            patch_len: 48,
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn_hidden: 128,
            head_hidden: 32,
            eps: 1e-5,
            seed: 0,
        }
    }
}

/// Patch projection, learnable positions, `layers` post-norm encoder blocks
/// with batch normalization, a token-axis layer norm and a two-layer head.
#[derive(Debug, Clone)]
pub struct ReferenceModel<T> {
    pub cfg: ReferenceConfig,
    pub store: ParamStore<T>,
}

impl<T: Real> ReferenceModel<T> {
    pub fn new(cfg: ReferenceConfig) -> Result<Self> {
        validate(cfg.tokens >= 1 && cfg.patch_len >= 1, || "tokens and patch_len must be >= 1".into())?;
        validate(cfg.heads >= 1 && cfg.d_model % cfg.heads == 0, || {
            format!("d_model {} is not divisible by {} heads", cfg.d_model, cfg.heads)
        })?;
        let (l, d, f, h) = (cfg.patch_len, cfg.d_model, cfg.ffn_hidden, cfg.head_hidden);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut r = seeded(cfg.seed, 0x5245_4600);
        let mut s = ParamStore::new();
        add_dense(&mut s, "patch", l, d, inv(l), true, &mut r)?;
        s.add("pos", Tensor::randn(&[cfg.tokens, d], 0.02, &mut r), true)?;
        for i in 0..cfg.layers {
            for p in ["q", "k", "v", "o"] {
                add_dense(&mut s, &format!("block{i}.attn.{p}"), d, d, inv(d), true, &mut r)?;
            }
            for bn in ["bn1", "bn2"] {
                let name = format!("block{i}.{bn}");
                add_norm(&mut s, &name, d, true)?;
                s.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[d]))?;
                s.add_buffer(format!("{name}.running_var"), Tensor::ones(&[d]))?;
            }
            add_dense(&mut s, &format!("block{i}.ffn.fc1"), d, f, inv(d), true, &mut r)?;
            add_dense(&mut s, &format!("block{i}.ffn.fc2"), f, d, inv(f), true, &mut r)?;
        }
        add_norm(&mut s, "ln", d, true)?;
        add_dense(&mut s, "head.fc1", d, h, inv(d), true, &mut r)?;
        add_dense(&mut s, "head.fc2", h, NUM_CLASSES, 0.01, true, &mut r)?;
        Ok(Self { cfg, store: s })
    }

    fn batch_norm(&self, sess: &mut Session<T>, name: &str, x: Var, mode: Mode) -> Result<(Var, Option<radarllm_nn::layers::BatchStats>)> {
        let (g, b) = norm_params(sess, name)?;
        let rm = sess.store().get(&format!("{name}.running_mean"))?.tensor.data().to_vec();
        let rv = sess.store().get(&format!("{name}.running_var"))?.tensor.data().to_vec();
        Ok(layers::batch_norm(&mut sess.g, x, g, b, &rm, &rv, mode, self.cfg.eps)?)
    }
}

fn attention<T: Real>(sess: &mut Session<T>, prefix: &str) -> Result<AttentionWeights> {
    let mut proj = |p: &str| -> Result<Projection> {
        Ok(Projection::Dense {
            w: sess.param(&format!("{prefix}.{p}.w"))?,
            b: Some(sess.param(&format!("{prefix}.{p}.b"))?),
        })
    };
    Ok(AttentionWeights {
        q: proj("q")?,
        k: proj("k")?,
        v: proj("v")?,
        o: proj("o")?,
    })
}

impl<T: Real> TokenModel<T> for ReferenceModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn token_shape(&self) -> (usize, usize) {
        (self.cfg.tokens, self.cfg.patch_len)
    }

    fn forward(&self, sess: &mut Session<T>, tokens: Var, mode: Mode) -> Result<ForwardOut> {
        check_tokens(sess, tokens, self.cfg.tokens, self.cfg.patch_len)?;
        let mut bn_stats = Vec::new();
        let x = dense(sess, "patch", tokens)?;
        let pos = sess.param("pos")?;
        let mut x = sess.g.add_row(x, pos)?;
        for i in 0..self.cfg.layers {
            let w = attention(sess, &format!("block{i}.attn"))?;
            let a = layers::multi_head_attention(&mut sess.g, x, &w, self.cfg.heads, false)?.out;
            let r = sess.g.add(x, a)?;
            let name = format!("block{i}.bn1");
            let (y, st) = self.batch_norm(sess, &name, r, mode)?;
            bn_stats.extend(st.map(|s| (name, s)));
            let h = dense(sess, &format!("block{i}.ffn.fc1"), y)?;
            let h = sess.g.gelu(h);
            let h = dense(sess, &format!("block{i}.ffn.fc2"), h)?;
            let r = sess.g.add(y, h)?;
            let name = format!("block{i}.bn2");
            let (y, st) = self.batch_norm(sess, &name, r, mode)?;
            bn_stats.extend(st.map(|s| (name, s)));
            x = y;
        }
        let (g, b) = norm_params(sess, "ln")?;
        let hidden = layers::layer_norm(&mut sess.g, x, g, b, self.cfg.eps)?;
        let h = dense(sess, "head.fc1", hidden)?;
        let h = sess.g.gelu(h);
        let logits = dense(sess, "head.fc2", h)?;
        Ok(ForwardOut {
            logits,
            hidden,
            bn_stats,
        })
    }
}
