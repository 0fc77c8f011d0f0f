use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use radarllm_nn::{Real, Session, Var};

use super::token_losses;
use crate::error::{validate, Error, Result};
use crate::features::FeatureTokenBatch;
use crate::models::ReferenceModel;

pub const SCORE_MAGIC: [u8; 4] = *b"RLSC";
pub const SCORE_VERSION: u16 = 1;

/// Cached per-token reference losses keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScoreTable {
    pub k: usize,
    pub alpha: f64,
    pub reference_checkpoint_id: String,
    pub sample_ids: Vec<u64>,
    /// `[len * K]`, row `i` belongs to `sample_ids[i]`.
    pub losses: Vec<f64>,
    index: HashMap<u64, usize>,
}

impl TokenScoreTable {
    pub fn new(k: usize, alpha: f64, reference_checkpoint_id: String, sample_ids: Vec<u64>, losses: Vec<f64>) -> Result<Self> {
        validate(k >= 1, || "score table needs K >= 1".into())?;
        validate(losses.len() == sample_ids.len() * k, || {
            format!("{} losses for {} samples x {k} tokens", losses.len(), sample_ids.len())
        })?;
        if let Some(v) = losses.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::NonFinite(format!("reference loss {v} must be finite and >= 0")));
        }
        let mut index = HashMap::with_capacity(sample_ids.len());
        for (i, &id) in sample_ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Validation(format!("duplicate sample id {id} in score table")));
            }
        }
        Ok(Self {
            k,
            alpha,
            reference_checkpoint_id,
            sample_ids,
            losses,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn get(&self, sample_id: u64) -> Option<&[f64]> {
        self.index.get(&sample_id).map(|&i| &self.losses[i * self.k..(i + 1) * self.k])
    }

    /// Concatenated rows for `ids`, or the full list of ids with no entry.
    pub fn lookup(&self, ids: &[u64]) -> Result<Vec<f64>> {
        let missing: Vec<u64> = ids.iter().copied().filter(|id| !self.index.contains_key(id)).collect();
        if !missing.is_empty() {
            return Err(Error::MissingSamples(missing));
        }
        Ok(ids.iter().flat_map(|&id| self.get(id).unwrap().iter().copied()).collect())
    }

    /// `magic "RLSC" | version u16 | K u32 | count u64 | alpha f64 |
    /// id_len u32 | id utf8 | count x (sample_id u64, K x f32)`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(30 + self.reference_checkpoint_id.len() + self.len() * (8 + 4 * self.k));
        b.extend_from_slice(&SCORE_MAGIC);
        b.extend_from_slice(&SCORE_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.k as u32).to_le_bytes());
        b.extend_from_slice(&(self.len() as u64).to_le_bytes());
        b.extend_from_slice(&self.alpha.to_le_bytes());
        b.extend_from_slice(&(self.reference_checkpoint_id.len() as u32).to_le_bytes());
        b.extend_from_slice(self.reference_checkpoint_id.as_bytes());
        for (i, id) in self.sample_ids.iter().enumerate() {
            b.extend_from_slice(&id.to_le_bytes());
            for v in &self.losses[i * self.k..(i + 1) * self.k] {
                b.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != SCORE_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: SCORE_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != SCORE_VERSION {
            return Err(Error::Version {
                path: path.into(),
                expected: SCORE_VERSION,
                found: version,
            });
        }
        let k = r.u32()? as usize;
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let alpha = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let id_len = r.u32()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::Validation(format!("{}: checkpoint id is not UTF-8", path.display())))?;
        let need = count.checked_mul(8 + 4 * k).unwrap_or(usize::MAX);
        if r.bytes.len() - r.pos != need {
            return Err(Error::Truncated {
                path: path.into(),
                detail: format!("expected {need} payload bytes, found {}", r.bytes.len() - r.pos),
            });
        }
        let mut ids = Vec::with_capacity(count);
        let mut losses = Vec::with_capacity(count * k);
        for _ in 0..count {
            ids.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            for _ in 0..k {
                losses.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
            }
        }
        Self::new(k, alpha, id, ids, losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                detail: format!("needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Eval-mode per-token cross-entropy of the reference model over every
/// sample of `train`.
pub fn score_tokens<T: Real>(
    reference: &ReferenceModel<T>,
    train: &FeatureTokenBatch,
    alpha: f64,
    checkpoint_id: &str,
) -> Result<TokenScoreTable> {
    if train.is_empty() {
        return Err(Error::EmptyInput("no training samples to score".into()));
    }
    let losses = token_losses(reference, train, 64)?;
    TokenScoreTable::new(train.k, alpha, checkpoint_id.to_string(), train.sample_ids.clone(), losses)
}

/// `s = max(L_t - alpha * L_r, 0)` elementwise.
pub fn token_importance(target: &[f64], reference: &[f64], alpha: f64) -> Result<Vec<f64>> {
    validate(target.len() == reference.len(), || {
        format!("loss shapes differ: {} vs {}", target.len(), reference.len())
    })?;
    if !alpha.is_finite() {
        return Err(Error::NonFinite(format!("alpha = {alpha}")));
    }
    target
        .iter()
        .zip(reference)
        .map(|(&t, &r)| {
            if t.is_finite() && r.is_finite() {
                Ok((t - alpha * r).max(0.0))
            } else {
                Err(Error::NonFinite(format!("losses ({t}, {r})")))
            }
        })
        .collect()
}

/// `sum(s * L_t) / (B * K)` over flattened `[B, K]` inputs.
pub fn preference_loss(target: &[f64], weights: &[f64]) -> Result<f64> {
    validate(target.len() == weights.len() && !target.is_empty(), || {
        format!("loss shapes differ: {} vs {}", target.len(), weights.len())
    })?;
    Ok(target.iter().zip(weights).map(|(l, s)| l * s).sum::<f64>() / target.len() as f64)
}

/// Graph form of [`preference_loss`]; `weights` enter as constants.
pub fn preference_loss_var<T: Real>(sess: &mut Session<T>, target: Var, weights: &[f64]) -> Result<Var> {
    let w: Vec<T> = weights.iter().map(|&s| T::from_f64_lossy(s)).collect();
    let weighted = sess.g.mul_const(target, &w)?;
    Ok(sess.g.mean(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn importance_examples() {
        let s = token_importance(&[1.0, 0.2, 3.0], &[0.5, 1.0, 0.0], 0.9).unwrap();
        assert!((s[0] - 0.55).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 3.0);
        assert_eq!(token_importance(&[0.3, 0.7], &[5.0, 5.0], 0.0).unwrap(), vec![0.3, 0.7]);
        assert!(token_importance(&[f64::NAN], &[0.0], 0.9).is_err());
    }

    #[test]
    fn preference_example() {
        assert_eq!(preference_loss(&[1.0, 2.0], &[0.5, 0.0]).unwrap(), 0.25);
    }

    #[test]
    fn table_bytes_round_trip_and_errors() {
        let t = TokenScoreTable::new(2, 0.9, "ref".into(), vec![7, 3], vec![0.5, 0.25, 1.0, 2.0]).unwrap();
        let p = Path::new("mem");
        let back = TokenScoreTable::from_bytes(p, &t.to_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.lookup(&[3, 7]).unwrap(), vec![1.0, 2.0, 0.5, 0.25]);
        match back.lookup(&[3, 9, 11]) {
            Err(Error::MissingSamples(ids)) => assert_eq!(ids, vec![9, 11]),
            other => panic!("{other:?}"),
        }
        let mut bad = t.to_bytes();
        bad[0] = b'X';
        assert!(matches!(TokenScoreTable::from_bytes(p, &bad), Err(Error::BadMagic { .. })));
        let b = t.to_bytes();
        assert!(matches!(TokenScoreTable::from_bytes(p, &b[..b.len() - 1]), Err(Error::Truncated { .. })));
        assert!(TokenScoreTable::new(1, 0.9, String::new(), vec![1], vec![-1.0]).is_err());
    }
}
