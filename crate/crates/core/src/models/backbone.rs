//! Pre-norm transformer stack with frozen base weights, low-rank adapters on
//! the query and value projections, and trainable norms, embedding and head.

use radarllm_nn::layers::{self, AttentionWeights, Mode, Projection};
use radarllm_nn::{ParamStore, Real, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{add_dense, add_norm, check_tokens, dense, norm_params, seeded, ForwardOut, Profile, TokenModel, NUM_CLASSES};
use crate::error::{validate, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub tokens: usize,
    pub patch_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Width of the hidden layer between the two output FC layers.
    pub head_hidden: usize,
    pub causal: bool,
    /// Learn the positional table (initialized sinusoidal) instead of
    /// keeping it fixed.
    pub trainable_positions: bool,
    pub eps: f64,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn profile(profile: Profile, tokens: usize, patch_len: usize) -> Self {
        let (width, heads) = match profile {
            Profile::Desk => (128, 4),
            Profile::Full => (768, 12),
        };
        Self {
            tokens,
            patch_len,
            width,
            layers: 4,
            heads,
            ffn_hidden: 4 * width,
            lora_rank: 8,
            lora_scale: 2.0,
            head_hidden: width / 2,
            causal: false,
            trainable_positions: false,
            eps: 1e-5,
            seed: 0,
        }
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk, 55, 48)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneModel<T> {
    pub cfg: BackboneConfig,
    pub store: ParamStore<T>,
    /// When false, adapters are skipped and the frozen base runs alone.
    pub use_lora: bool,
    positions: Tensor<T>,
}

const ADAPTED: [&str; 2] = ["q", "v"];

impl<T: Real> BackboneModel<T> {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        validate(cfg.tokens >= 1 && cfg.patch_len >= 1, || "tokens and patch_len must be >= 1".into())?;
        validate(cfg.heads >= 1 && cfg.width % cfg.heads == 0, || {
            format!("width {} is not divisible by {} heads", cfg.width, cfg.heads)
        })?;
        validate(cfg.lora_rank >= 1, || "LoRA rank must be >= 1".into())?;
        let (l, d, f, r) = (cfg.patch_len, cfg.width, cfg.ffn_hidden, cfg.lora_rank);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let positions = layers::sinusoidal_positional_encoding::<T>(cfg.tokens, d)?;
        let mut base = seeded(cfg.seed, 0x4241_5345);
        let mut train = seeded(cfg.seed, 0x4c4f_5241);
        let mut s = ParamStore::new();
        add_dense(&mut s, "embed", l, d, inv(l), true, &mut train)?;
        if cfg.trainable_positions {
            s.add("pos", positions.clone(), true)?;
        }
        for i in 0..cfg.layers {
            let p = format!("layer{i}");
            add_norm(&mut s, &format!("{p}.ln1"), d, true)?;
            for m in ["q", "k", "v", "o"] {
                add_dense(&mut s, &format!("{p}.attn.{m}"), d, d, 0.02, false, &mut base)?;
                if ADAPTED.contains(&m) {
                    s.add(format!("{p}.attn.{m}.lora_a"), Tensor::randn(&[d, r], 0.02, &mut train), true)?;
                    s.add(format!("{p}.attn.{m}.lora_b"), Tensor::zeros(&[r, d]), true)?;
                }
            }
            add_norm(&mut s, &format!("{p}.ln2"), d, true)?;
            add_dense(&mut s, &format!("{p}.mlp.fc"), d, f, 0.02, false, &mut base)?;
            add_dense(&mut s, &format!("{p}.mlp.proj"), f, d, 0.02, false, &mut base)?;
        }
        add_norm(&mut s, "ln_out", d, true)?;
        add_dense(&mut s, "head.fc1", d, cfg.head_hidden, inv(d), true, &mut train)?;
        add_dense(&mut s, "head.fc2", cfg.head_hidden, NUM_CLASSES, 0.01, true, &mut train)?;
        Ok(Self {
            cfg,
            store: s,
            use_lora: true,
            positions,
        })
    }

    fn attention(&self, sess: &mut Session<T>, prefix: &str) -> Result<AttentionWeights> {
        let scale = self.cfg.lora_scale;
        let use_lora = self.use_lora;
        let mut proj = |m: &str| -> Result<Projection> {
            let w = sess.param(&format!("{prefix}.{m}.w"))?;
            let b = Some(sess.param(&format!("{prefix}.{m}.b"))?);
            if use_lora && ADAPTED.contains(&m) {
                let a = sess.param(&format!("{prefix}.{m}.lora_a"))?;
                let bm = sess.param(&format!("{prefix}.{m}.lora_b"))?;
                Ok(Projection::Lora { w, b, a, bm, scale })
            } else {
                Ok(Projection::Dense { w, b })
            }
        };
        Ok(AttentionWeights {
            q: proj("q")?,
            k: proj("k")?,
            v: proj("v")?,
            o: proj("o")?,
        })
    }
}

impl<T: Real> TokenModel<T> for BackboneModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn token_shape(&self) -> (usize, usize) {
        (self.cfg.tokens, self.cfg.patch_len)
    }

    fn forward(&self, sess: &mut Session<T>, tokens: Var, _mode: Mode) -> Result<ForwardOut> {
        check_tokens(sess, tokens, self.cfg.tokens, self.cfg.patch_len)?;
        let eps = self.cfg.eps;
        let x = dense(sess, "embed", tokens)?;
        let pos = if self.cfg.trainable_positions {
            sess.param("pos")?
        } else {
            sess.g.constant(self.positions.clone())
        };
        let mut x = sess.g.add_row(x, pos)?;
        for i in 0..self.cfg.layers {
            let p = format!("layer{i}");
            let (g, b) = norm_params(sess, &format!("{p}.ln1"))?;
            let h = layers::feature_layer_norm(&mut sess.g, x, g, b, eps)?;
            let w = self.attention(sess, &format!("{p}.attn"))?;
            let a = layers::multi_head_attention(&mut sess.g, h, &w, self.cfg.heads, self.cfg.causal)?.out;
            x = sess.g.add(x, a)?;
            let (g, b) = norm_params(sess, &format!("{p}.ln2"))?;
            let h = layers::feature_layer_norm(&mut sess.g, x, g, b, eps)?;
            let h = dense(sess, &format!("{p}.mlp.fc"), h)?;
            let h = sess.g.gelu(h);
            let h = dense(sess, &format!("{p}.mlp.proj"), h)?;
            x = sess.g.add(x, h)?;
        }
        let (g, b) = norm_params(sess, "ln_out")?;
        let hidden = layers::layer_norm(&mut sess.g, x, g, b, eps)?;
        let h = dense(sess, "head.fc1", hidden)?;
        let h = sess.g.gelu(h);
        let logits = dense(sess, "head.fc2", h)?;
        Ok(ForwardOut {
            logits,
            hidden,
            bn_stats: Vec::new(),
        })
    }
}
