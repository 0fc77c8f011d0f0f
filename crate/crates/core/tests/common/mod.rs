//! Independent direct-formula oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use radarllm_core::data::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_signal(r: &mut ChaCha8Rng, n: usize) -> Vec<Complex> {
    (0..n)
        .map(|_| Complex::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)))
        .collect()
}

fn twiddle(k: i64, n: i64, len: i64) -> Complex {
    let idx = (k * n).rem_euclid(len) as f64;
    Complex::from_polar(1.0, -2.0 * PI * idx / len as f64)
}

/// Direct summation at frequencies `k = -floor(N/2) .. ceil(N/2) - 1`.
pub fn naive_centered_dft(x: &[Complex]) -> Vec<Complex> {
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            let k = i - n / 2;
            x.iter().enumerate().map(|(t, &v)| v * twiddle(k, t as i64, n)).sum()
        })
        .collect()
}

pub fn naive_spectrum(x: &[Complex]) -> Vec<f64> {
    let s = (x.len() as f64).sqrt();
    naive_centered_dft(x).iter().map(|z| z.norm() / s).collect()
}

pub fn naive_doppler_phase(x: &[Complex]) -> Vec<f64> {
    naive_centered_dft(x).iter().map(|z| z.im.atan2(z.re)).collect()
}

pub fn naive_dse(f: &[f64]) -> Vec<f64> {
    let total: f64 = f.iter().sum();
    f.iter()
        .map(|&v| if v == 0.0 { 0.0 } else { -(v / total) * (v / total).ln() })
        .collect()
}

/// Double loop over bins and frames with the window placed at `m * hop`.
pub fn naive_stft(x: &[Complex], w: &[f64], hop: usize, omega: usize) -> Vec<Vec<Complex>> {
    let frames = (x.len() - w.len()) / hop + 1;
    (0..omega)
        .map(|k| {
            (0..frames)
                .map(|m| {
                    let mut acc = Complex::new(0.0, 0.0);
                    for (n, &v) in x.iter().enumerate() {
                        let j = n as i64 - (m * hop) as i64;
                        if j >= 0 && (j as usize) < w.len() {
                            acc += v * w[j as usize] * twiddle(k as i64, n as i64, omega as i64);
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn naive_sms(s: &[Vec<Complex>]) -> Vec<f64> {
    s.iter()
        .map(|row| 10.0 * row.iter().map(|z| z.norm()).sum::<f64>().max(1e-12).log10())
        .collect()
}

pub fn naive_amplitude(x: &[Complex]) -> Vec<f64> {
    x.iter().map(|z| (z.re * z.re + z.im * z.im).sqrt()).collect()
}

pub fn naive_phase(x: &[Complex]) -> Vec<f64> {
    x.iter().map(|z| z.im.atan2(z.re)).collect()
}

/// Smallest difference of two angles modulo 2 pi.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_angle(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| angle_diff(*x, *y)).fold(0.0, f64::max)
}

/// Worst error of every feature operation against its oracle over
/// `count` random inputs; names in IP, spectrum, DSE, STFT, SMS, Amp, DP order.
pub fn feature_oracle_errors(seed: u64, count: usize) -> [(&'static str, f64); 7] {
    use radarllm_core::features as f;
    use rand::SeedableRng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 7];
    for i in 0..count {
        let n = if i % 5 == 0 { 512 } else { r.random_range(8..200) };
        let x = random_signal(&mut r, n);
        let spec = f::doppler_amplitude_spectrum(&x);
        let errs = {
            let wlen = r.random_range(1..=n.min(64));
            let hop = r.random_range(1..=16);
            let omega = r.random_range(wlen..=n.max(wlen));
            let w: Vec<f64> = (0..wlen).map(|_| r.random_range(0.0..1.0)).collect();
            let s = f::stft(&x, &w, hop, omega).unwrap();
            let naive = naive_stft(&x, &w, hop, omega);
            let mut stft_err = 0.0f64;
            for (k, row) in naive.iter().enumerate() {
                for (m, z) in row.iter().enumerate() {
                    stft_err = stft_err.max((s.at(k, m) - z).norm());
                }
            }
            let rand_spec: Vec<f64> = (0..n).map(|_| r.random_range(0.0..3.0)).collect();
            [
                max_angle(&f::instantaneous_phase(&x), &naive_phase(&x)),
                max_abs(&spec, &naive_spectrum(&x)),
                max_abs(&f::doppler_spectrum_entropy(&rand_spec).unwrap(), &naive_dse(&rand_spec)),
                stft_err,
                max_abs(&f::sms(&s), &naive_sms(&naive)),
                max_abs(&f::amplitude(&x), &naive_amplitude(&x)),
                max_angle(&f::doppler_phase(&x), &naive_doppler_phase(&x)),
            ]
        };
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let names = ["IP", "Doppler spectrum", "DSE", "STFT", "SMS", "Amp", "DP"];
    std::array::from_fn(|i| (names[i], worst[i]))
}

use radarllm_core::data::Label;
use radarllm_core::features::{FeatureKind, FeatureTokenBatch, TokenOrigin};
use radarllm_core::models::{BackboneConfig, ReferenceConfig};
use radarllm_nn::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_distr::StandardNormal;

/// Alternating-label samples where every token is `±signal * pattern` plus
/// unit noise scaled by `noise`.
pub fn toy_batch(n: usize, k: usize, l: usize, signal: f64, noise: f64, seed: u64) -> FeatureTokenBatch {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let pattern: Vec<f64> = (0..l).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let origin = (0..k)
        .map(|p| TokenOrigin {
            feature: FeatureKind::ALL[p % 5],
            patch: p / 5,
        })
        .collect();
    let mut b = FeatureTokenBatch::empty(k, l, [k * l, 0, 0, 0, 0], origin);
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Target } else { Label::Clutter };
        let sign = if label == Label::Target { 1.0 } else { -1.0 };
        for _ in 0..k {
            for p in &pattern {
                let e: f64 = r.sample(StandardNormal);
                b.tokens.push(sign * signal * p + noise * e);
            }
        }
        b.labels.push(label);
        b.sample_ids.push(1000 + i as u64);
    }
    b
}

pub fn tiny_reference_cfg(k: usize, l: usize, seed: u64) -> ReferenceConfig {
    ReferenceConfig {
        tokens: k,
        patch_len: l,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_hidden: 16,
        head_hidden: 4,
        eps: 1e-5,
        seed,
    }
}

pub fn tiny_backbone_cfg(k: usize, l: usize, seed: u64) -> BackboneConfig {
    BackboneConfig {
        tokens: k,
        patch_len: l,
        width: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 16,
        lora_rank: 2,
        lora_scale: 2.0,
        head_hidden: 4,
        causal: false,
        trainable_positions: false,
        eps: 1e-5,
        seed,
    }
}

/// Redraws every parameter at O(1) scale. Initialization scales (0.02
/// frozen weights, zero LoRA `B`, small output layer) make true gradients
/// so small that finite-difference rounding would dominate the comparison.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut().filter(|p| !p.buffer) {
        let base = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
        p.tensor = Tensor::randn(p.tensor.shape(), 0.5, &mut r).map(|v| v + base);
    }
}

pub fn to_nn(e: radarllm_core::Error) -> radarllm_nn::NnError {
    radarllm_nn::NnError::Invalid(e.to_string())
}
