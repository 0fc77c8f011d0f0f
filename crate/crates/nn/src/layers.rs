//! Differentiable building blocks expressed over [`Graph`] variables.

use crate::error::{shape_err, NnError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

/// `x W + b` over the last axis.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Fixed sinusoidal table `E[k, 2l] = sin(k / 10000^(2l/d))`,
/// `E[k, 2l+1] = cos(k / 10000^(2l/d))`.
pub fn sinusoidal_positional_encoding<T: Real>(tokens: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(NnError::Invalid(format!(
            "positional encoding width must be even, got {dim}"
        )));
    }
    let mut data = vec![T::zero(); tokens * dim];
    for k in 0..tokens {
        for l in 0..dim / 2 {
            let angle = k as f64 / 10000f64.powf(2.0 * l as f64 / dim as f64);
            data[k * dim + 2 * l] = c(angle.sin());
            data[k * dim + 2 * l + 1] = c(angle.cos());
        }
    }
    Tensor::new(&[tokens, dim], data)
}

fn dims3<T: Real>(g: &Graph<T>, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [b, k, d] => Ok((b, k, d)),
        ref s => shape_err(op, format!("expected [B, K, D], got {s:?}")),
    }
}

fn affine<T: Real>(g: &mut Graph<T>, xhat: Var, gamma: Var, beta: Var) -> Result<Var> {
    let y = g.mul_row(xhat, gamma)?;
    g.add_row(y, beta)
}

/// Normalization over the token axis of `[B, K, D]`: statistics are taken
/// over `K` for every `(b, d)`, then scaled by `gamma[d]` and shifted by
/// `beta[d]`.
pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let (b, k, d) = dims3(g, x, "layer_norm")?;
    if g.shape(gamma) != [d] || g.shape(beta) != [d] {
        return shape_err("layer_norm", format!("gamma/beta must be [{d}]"));
    }
    let xhat = g.normalize(x, b, k, d, c(eps))?;
    affine(g, xhat, gamma, beta)
}

/// Conventional layer normalization over the last (feature) axis.
pub fn feature_layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if d == 0 || g.shape(gamma) != [d] || g.shape(beta) != [d] {
        return shape_err("feature_layer_norm", format!("gamma/beta must be [{d}]"));
    }
    let rows = g.value(x).len() / d;
    let xhat = g.normalize(x, rows, d, 1, c(eps))?;
    affine(g, xhat, gamma, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode [`batch_norm`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Folds batch statistics into running statistics with momentum 0.1.
pub fn update_running<T: Real>(running_mean: &mut [T], running_var: &mut [T], stats: &BatchStats) {
    let m = BN_MOMENTUM;
    for (r, &v) in running_mean.iter_mut().zip(&stats.mean) {
        *r = c((1.0 - m) * r.to_f64_lossy() + m * v);
    }
    for (r, &v) in running_var.iter_mut().zip(&stats.var) {
        *r = c((1.0 - m) * r.to_f64_lossy() + m * v);
    }
}

/// Batch normalization of `[B, K, D]` per channel `D`.
///
/// Train mode normalizes with statistics over `(B, K)` and returns them so
/// the caller can update running statistics; eval mode uses the provided
/// running statistics as constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
    eps: f64,
) -> Result<(Var, Option<BatchStats>)> {
    let (b, k, d) = dims3(g, x, "batch_norm")?;
    if g.shape(gamma) != [d] || g.shape(beta) != [d] || running_mean.len() != d || running_var.len() != d {
        return shape_err("batch_norm", format!("channel parameters must be [{d}]"));
    }
    match mode {
        Mode::Train => {
            if b < 2 {
                return Err(NnError::Invalid(
                    "batch norm in train mode needs at least 2 samples".into(),
                ));
            }
            let n = b * k;
            let xs = g.value(x).data();
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for row in xs.chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v.to_f64_lossy();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for row in xs.chunks(d) {
                for j in 0..d {
                    let dv = row[j].to_f64_lossy() - mean[j];
                    var[j] += dv * dv;
                }
            }
            let unbiased = var.iter().map(|v| v / (n as f64 - 1.0)).collect();
            let xhat = g.normalize(x, 1, n, d, c(eps))?;
            let y = affine(g, xhat, gamma, beta)?;
            Ok((y, Some(BatchStats { mean, var: unbiased })))
        }
        Mode::Eval => {
            let scale: Vec<T> = running_var.iter().map(|&v| T::one() / (v + c(eps)).sqrt()).collect();
            let shift: Vec<T> = running_mean
                .iter()
                .zip(&scale)
                .map(|(&m, &s)| T::zero() - m * s)
                .collect();
            let sv = g.constant(Tensor::new(&[d], scale)?);
            let sh = g.constant(Tensor::new(&[d], shift)?);
            let xn = g.mul_row(x, sv)?;
            let xn = g.add_row(xn, sh)?;
            Ok((affine(g, xn, gamma, beta)?, None))
        }
    }
}

/// A projection inside attention: dense, or dense plus a low-rank adapter.
#[derive(Debug, Clone, Copy)]
pub enum Projection {
    Dense { w: Var, b: Option<Var> },
    Lora { w: Var, b: Option<Var>, a: Var, bm: Var, scale: f64 },
}

impl Projection {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match *self {
            Projection::Dense { w, b } => linear(g, x, w, b),
            Projection::Lora { w, b, a, bm, scale } => lora_linear(g, x, w, b, a, bm, scale),
        }
    }
}

/// `x (W + s A B) + b`, evaluated as two paths so that only `A` and `B`
/// need gradients while `W` stays frozen.
pub fn lora_linear<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    a: Var,
    bm: Var,
    scale: f64,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let down = g.matmul(x, a)?;
    let up = g.matmul(down, bm)?;
    let up = g.scale(up, c(scale));
    let y = g.add(base, up)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// `W + s A B` as a single dense matrix.
pub fn merge_lora<T: Real>(w: &Tensor<T>, a: &Tensor<T>, bm: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    let (din, dout) = match *w.shape() {
        [i, o] => (i, o),
        ref s => return shape_err("merge_lora", format!("weight {s:?}")),
    };
    let r = a.shape().get(1).copied().unwrap_or(0);
    if a.shape() != [din, r] || bm.shape() != [r, dout] {
        return shape_err(
            "merge_lora",
            format!("{:?} + {:?} x {:?}", w.shape(), a.shape(), bm.shape()),
        );
    }
    let mut out = w.data().to_vec();
    T::gemm(
        din,
        r,
        dout,
        c(scale),
        a.data(),
        (r as isize, 1),
        bm.data(),
        (dout as isize, 1),
        T::one(),
        &mut out,
        (dout as isize, 1),
    );
    Tensor::new(&[din, dout], out)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    /// Attention probabilities `[B*H, K, K]`.
    pub probs: Var,
}

/// Multi-head scaled dot-product self-attention over `[B, K, D]`.
/// Bidirectional unless `causal` is set.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
    causal: bool,
) -> Result<AttentionOutput> {
    let (b, k, d) = dims3(g, x, "multi_head_attention")?;
    if heads == 0 || d % heads != 0 {
        return Err(NnError::Invalid(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let v = g.reshape(v, &[b, k, heads, dk])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(v, &[b * heads, k, dk])
    };
    let q = w.q.apply(g, x)?;
    let kk = w.k.apply(g, x)?;
    let v = w.v.apply(g, x)?;
    let (q, kk, v) = (split(g, q)?, split(g, kk)?, split(g, v)?);
    let scores = g.bmm(q, kk, true)?;
    let mut scores = g.scale(scores, c(1.0 / (dk as f64).sqrt()));
    if causal {
        let mut mask = vec![T::zero(); k * k];
        for i in 0..k {
            for j in i + 1..k {
                mask[i * k + j] = c(-1e9);
            }
        }
        let m = g.constant(Tensor::new(&[k, k], mask)?);
        scores = g.add_row(scores, m)?;
    }
    let probs = g.softmax(scores)?;
    let o = g.bmm(probs, v, false)?;
    let o = g.reshape(o, &[b, heads, k, dk])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, k, d])?;
    let out = w.o.apply(g, o)?;
    Ok(AttentionOutput { out, probs })
}
