//! Per-feature normalization and non-overlapping patch tokenization.

use std::path::Path;

use radarllm_nn::{Real, Tensor};
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::data::Label;
use crate::error::{validate, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Ip,
    Dse,
    Sms,
    Amp,
    Dp,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::Ip,
        FeatureKind::Dse,
        FeatureKind::Sms,
        FeatureKind::Amp,
        FeatureKind::Dp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Ip => "IP",
            FeatureKind::Dse => "DSE",
            FeatureKind::Sms => "SMS",
            FeatureKind::Amp => "Amp",
            FeatureKind::Dp => "DP",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    pub sample_id: u64,
    pub label: Label,
    pub features: FeatureSet,
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl FeatureNorm {
    /// Statistics pooled over every value of each channel. A channel with
    /// zero spread keeps unit scale.
    pub fn fit(samples: &[SampleFeatures]) -> Result<FeatureNorm> {
        validate(!samples.is_empty(), || "cannot fit normalization on no samples".into())?;
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for c in 0..5 {
            let mut n = 0usize;
            let mut sum = 0.0;
            for s in samples {
                let ch = s.features.channels()[c];
                n += ch.len();
                sum += ch.iter().sum::<f64>();
            }
            let mu = sum / n as f64;
            let var = samples
                .iter()
                .flat_map(|s| s.features.channels()[c].iter())
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>()
                / n as f64;
            mean[c] = mu;
            std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(FeatureNorm { mean, std })
    }

    pub fn identity() -> FeatureNorm {
        FeatureNorm {
            mean: [0.0; 5],
            std: [1.0; 5],
        }
    }

    pub fn apply(&self, s: &SampleFeatures) -> SampleFeatures {
        let mut out = s.clone();
        for (c, ch) in out.features.channels_mut().into_iter().enumerate() {
            ch.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOrigin {
    pub feature: FeatureKind,
    pub patch: usize,
}

/// Patched features of a batch: `tokens` is `[B, K, L]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTokenBatch {
    pub k: usize,
    pub l: usize,
    /// Unpadded length of each feature channel.
    pub feature_lens: [usize; 5],
    pub tokens: Vec<f64>,
    pub labels: Vec<Label>,
    pub sample_ids: Vec<u64>,
    pub origin: Vec<TokenOrigin>,
}

impl FeatureTokenBatch {
    pub fn empty(k: usize, l: usize, feature_lens: [usize; 5], origin: Vec<TokenOrigin>) -> Self {
        Self {
            k,
            l,
            feature_lens,
            tokens: Vec::new(),
            labels: Vec::new(),
            sample_ids: Vec::new(),
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.k * self.l;
        &self.tokens[i * s..(i + 1) * s]
    }

    pub fn select(&self, idx: &[usize]) -> FeatureTokenBatch {
        let mut out = Self::empty(self.k, self.l, self.feature_lens, self.origin.clone());
        for &i in idx {
            out.tokens.extend_from_slice(self.sample(i));
            out.labels.push(self.labels[i]);
            out.sample_ids.push(self.sample_ids[i]);
        }
        out
    }

    /// Appends the samples of `other`, which must share the token layout.
    pub fn extend(&mut self, other: &FeatureTokenBatch) -> Result<()> {
        if (self.k, self.l, self.feature_lens) != (other.k, other.l, other.feature_lens) {
            return Err(Error::Validation("token layouts differ".into()));
        }
        self.tokens.extend_from_slice(&other.tokens);
        self.labels.extend_from_slice(&other.labels);
        self.sample_ids.extend_from_slice(&other.sample_ids);
        Ok(())
    }

    /// `[len(idx), K, L]` tensor of the selected samples.
    pub fn tensor<T: Real>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.k * self.l);
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::new(&[idx.len(), self.k, self.l], data).expect("shape matches data")
    }

    /// Sample labels broadcast to every token, as class indices `[len(idx) * K]`.
    pub fn token_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter()
            .flat_map(|&i| std::iter::repeat_n(self.labels[i].class_index(), self.k))
            .collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Feature and patch index of every token for channels of the given
/// lengths cut into patches of length `l`.
pub fn token_origins(feature_lens: &[usize; 5], l: usize) -> Vec<TokenOrigin> {
    let mut origin = Vec::new();
    for (kind, &n) in FeatureKind::ALL.iter().zip(feature_lens) {
        for p in 0..n.div_ceil(l.max(1)) {
            origin.push(TokenOrigin { feature: *kind, patch: p });
        }
    }
    origin
}

/// Splits every feature channel into `ceil(len / L)` patches of length `L`,
/// zero-padding the last, and concatenates them channel by channel.
pub fn patch(samples: &[SampleFeatures], l: usize) -> Result<FeatureTokenBatch> {
    validate(l >= 1, || "patch length must be >= 1".into())?;
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput("no samples to patch".into()))?;
    let lens: Vec<usize> = first.features.channels().iter().map(|c| c.len()).collect();
    let feature_lens: [usize; 5] = lens.try_into().expect("five channels");
    let origin = token_origins(&feature_lens, l);
    let k = origin.len();
    let mut out = FeatureTokenBatch::empty(k, l, feature_lens, origin);
    out.tokens.reserve(samples.len() * k * l);
    for s in samples {
        for (c, ch) in s.features.channels().iter().enumerate() {
            validate(ch.len() == feature_lens[c], || {
                format!(
                    "sample {}: channel {} has length {}, expected {}",
                    s.sample_id,
                    FeatureKind::ALL[c].name(),
                    ch.len(),
                    feature_lens[c]
                )
            })?;
            let padded = ch.len().div_ceil(l) * l;
            out.tokens.extend_from_slice(ch);
            out.tokens.extend(std::iter::repeat_n(0.0, padded - ch.len()));
        }
        out.labels.push(s.label);
        out.sample_ids.push(s.sample_id);
    }
    Ok(out)
}

/// Inverse of [`patch`]: drops the padding and restores each channel.
pub fn unpatch(batch: &FeatureTokenBatch) -> Vec<SampleFeatures> {
    (0..batch.len())
        .map(|i| {
            let row = batch.sample(i);
            let mut off = 0;
            let channels = batch.feature_lens.map(|n| {
                let ch = row[off..off + n].to_vec();
                off += n.div_ceil(batch.l) * batch.l;
                ch
            });
            SampleFeatures {
                sample_id: batch.sample_ids[i],
                label: batch.labels[i],
                features: FeatureSet::from_channels(channels),
            }
        })
        .collect()
}

/// Long-format dump: `sample_id,feature_name,bin_index,value`.
pub fn write_feature_csv(path: &Path, samples: &[SampleFeatures]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    w.write_record(["sample_id", "feature_name", "bin_index", "value"])?;
    for s in samples {
        for (kind, ch) in FeatureKind::ALL.iter().zip(s.features.channels()) {
            for (i, v) in ch.iter().enumerate() {
                w.write_record([s.sample_id.to_string(), kind.name().into(), i.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
