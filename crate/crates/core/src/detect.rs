//! Threshold selection at a requested false-alarm rate, detection metrics,
//! ROC curves and report tables.

use std::collections::BTreeMap;
use std::path::Path;

use radarllm_nn::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{validate, Error, Result};

/// Mean target-class (index 0) softmax probability over the tokens of each
/// sample of `[B, K, 2]` logits.
pub fn aggregate_token_outputs<T: Real>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    let (b, k) = match *logits.shape() {
        [b, k, 2] if k > 0 => (b, k),
        ref s => return Err(Error::Validation(format!("expected logits [B, K, 2], got {s:?}"))),
    };
    let d = logits.data();
    Ok((0..b)
        .map(|i| {
            (0..k)
                .map(|t| {
                    let j = (i * k + t) * 2;
                    target_probability(d[j].to_f64_lossy(), d[j + 1].to_f64_lossy())
                })
                .sum::<f64>()
                / k as f64
        })
        .collect())
}

/// `softmax([z0, z1])[0]`, stable for large margins.
pub fn target_probability(z0: f64, z1: f64) -> f64 {
    1.0 / (1.0 + (z1 - z0).exp())
}

/// `eta` is the `ceil(P_fa * N)`-th largest clutter score (1-indexed).
pub fn select_threshold(clutter_scores: &[f64], pfa: f64) -> Result<f64> {
    validate(pfa > 0.0 && pfa <= 1.0, || format!("requested false-alarm rate {pfa} not in (0, 1]"))?;
    if clutter_scores.is_empty() {
        return Err(Error::EmptyInput("no clutter scores".into()));
    }
    validate(clutter_scores.iter().all(|s| s.is_finite()), || "clutter scores must be finite".into())?;
    let mut sorted = clutter_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let x = ((pfa * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[x.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: u64,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub dr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scorer: String,
    pub config_hash: String,
    pub requested_pfa: f64,
    pub threshold: f64,
    pub achieved_far: f64,
    pub detection_rate: f64,
    pub n_target: usize,
    pub n_clutter: usize,
    pub samples: Vec<ScoredSample>,
    pub roc: Vec<RocPoint>,
}

fn split_scores(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    for s in samples {
        if !(s.score.is_finite() && (0.0..=1.0).contains(&s.score)) {
            return Err(Error::Validation(format!(
                "sample {} has score {} outside [0, 1]",
                s.sample_id, s.score
            )));
        }
    }
    let pick = |l: Label| samples.iter().filter(|s| s.label == l).map(|s| s.score).collect::<Vec<_>>();
    let (t, c) = (pick(Label::Target), pick(Label::Clutter));
    if t.is_empty() || c.is_empty() {
        return Err(Error::Validation("both target and clutter samples are required".into()));
    }
    Ok((t, c))
}

/// Declares a target iff `score > eta` with `eta` chosen on clutter only.
pub fn evaluate(samples: &[ScoredSample], pfa: f64, scorer: &str, config_hash: &str) -> Result<DetectionReport> {
    let (t, c) = split_scores(samples)?;
    let eta = select_threshold(&c, pfa)?;
    let rate = |v: &[f64]| v.iter().filter(|&&s| s > eta).count() as f64 / v.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by_key(|s| s.sample_id);
    Ok(DetectionReport {
        scorer: scorer.to_string(),
        config_hash: config_hash.to_string(),
        requested_pfa: pfa,
        threshold: eta,
        achieved_far: rate(&c),
        detection_rate: rate(&t),
        n_target: t.len(),
        n_clutter: c.len(),
        samples: sorted,
        roc: roc_curve(samples)?,
    })
}

/// Sweeps `score >= t` over every distinct score from high to low, starting
/// at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<RocPoint>> {
    let (t, c) = split_scores(samples)?;
    let mut all: Vec<(f64, Label)> = samples.iter().map(|s| (s.score, s.label)).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nt, nc) = (t.len() as f64, c.len() as f64);
    let mut points = vec![RocPoint { far: 0.0, dr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            match all[i].1 {
                Label::Target => tp += 1,
                Label::Clutter => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            far: fp as f64 / nc,
            dr: tp as f64 / nt,
        });
    }
    Ok(points)
}

impl DetectionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    w.write_record(["far", "dr"])?;
    for p in roc {
        w.write_record([p.far.to_string(), p.dr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-dataset detection rates and their plain mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTable {
    pub rows: Vec<(String, f64, f64)>,
    pub mean_dr: f64,
}

pub fn merge_reports(named: &[(String, DetectionReport)]) -> Result<ReportTable> {
    if named.is_empty() {
        return Err(Error::EmptyInput("no reports to merge".into()));
    }
    let rows: Vec<(String, f64, f64)> = named
        .iter()
        .map(|(n, r)| (n.clone(), r.detection_rate, r.achieved_far))
        .collect();
    let mean_dr = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    Ok(ReportTable { rows, mean_dr })
}

impl ReportTable {
    /// `dataset,dr,far` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,dr,far\n");
        for (n, dr, far) in &self.rows {
            s += &format!("{n},{dr:.6},{far:.6}\n");
        }
        s += &format!("mean,{:.6},\n", self.mean_dr);
        s
    }
}

/// Row-wise comparison of two report sets keyed by dataset name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareTable {
    pub rows: Vec<(String, f64, f64, f64)>,
    pub mean_delta: f64,
}

pub fn compare_reports(a: &[(String, DetectionReport)], b: &[(String, DetectionReport)]) -> Result<CompareTable> {
    let bmap: BTreeMap<&str, &DetectionReport> = b.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let mut rows = Vec::new();
    for (name, ra) in a {
        let rb = bmap
            .get(name.as_str())
            .ok_or_else(|| Error::ArtifactMismatch(format!("no counterpart report for `{name}`")))?;
        rows.push((name.clone(), ra.detection_rate, rb.detection_rate, ra.detection_rate - rb.detection_rate));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no reports to compare".into()));
    }
    let mean_delta = rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64;
    Ok(CompareTable { rows, mean_delta })
}

impl CompareTable {
    pub fn to_csv(&self, a_name: &str, b_name: &str) -> String {
        let mut s = format!("dataset,dr_{a_name},dr_{b_name},delta\n");
        for (n, x, y, d) in &self.rows {
            s += &format!("{n},{x:.6},{y:.6},{d:+.6}\n");
        }
        s += &format!("mean,,,{:+.6}\n", self.mean_delta);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, label: Label, score: f64) -> ScoredSample {
        ScoredSample {
            sample_id: id,
            label,
            score,
        }
    }

    #[test]
    fn aggregation_limits() {
        let l = Tensor::new(&[1, 3, 2], vec![60.0f64, 0.0, 60.0, 0.0, 60.0, 0.0]).unwrap();
        assert!((aggregate_token_outputs(&l).unwrap()[0] - 1.0).abs() < 1e-12);
        let u = Tensor::new(&[2, 2, 2], vec![0.3f64; 8]).unwrap();
        assert_eq!(aggregate_token_outputs(&u).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (0..6000).map(|i| i as f64 / 6000.0).collect();
        assert_eq!(select_threshold(&scores, 0.005).unwrap(), 5970.0 / 6000.0);
        let ten: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let eta = select_threshold(&ten, 0.05).unwrap();
        assert_eq!(eta, 0.9);
        assert_eq!(ten.iter().filter(|&&s| s > eta).count(), 0);
        assert!(select_threshold(&[], 0.1).is_err());
        assert!(select_threshold(&ten, 0.0).is_err());
    }

    #[test]
    fn perfect_separation() {
        let mut s: Vec<ScoredSample> = (0..20).map(|i| sample(i, Label::Target, 0.9)).collect();
        s.extend((20..220).map(|i| sample(i, Label::Clutter, 0.1)));
        let r = evaluate(&s, 0.01, "test", "h").unwrap();
        assert_eq!((r.detection_rate, r.achieved_far), (1.0, 0.0));
        assert!(r.roc.contains(&RocPoint { far: 0.0, dr: 1.0 }));
        assert_eq!(*r.roc.last().unwrap(), RocPoint { far: 1.0, dr: 1.0 });
    }

    #[test]
    fn flipped_scores_still_report() {
        let mut s: Vec<ScoredSample> = (0..20).map(|i| sample(i, Label::Target, 0.1)).collect();
        s.extend((20..120).map(|i| sample(i, Label::Clutter, 0.9 - i as f64 * 1e-4)));
        let r = evaluate(&s, 0.05, "test", "h").unwrap();
        assert_eq!(r.detection_rate, 0.0);
        assert!(r.to_json().unwrap().contains("\"detection_rate\""));
    }

    #[test]
    fn single_class_rejected() {
        let s: Vec<ScoredSample> = (0..5).map(|i| sample(i, Label::Clutter, 0.2)).collect();
        assert!(evaluate(&s, 0.1, "t", "h").is_err());
        assert!(roc_curve(&s).is_err());
    }

    #[test]
    fn merge_and_compare_tables() {
        let mk = |dr: f64| DetectionReport {
            scorer: "s".into(),
            config_hash: "h".into(),
            requested_pfa: 0.01,
            threshold: 0.5,
            achieved_far: 0.0,
            detection_rate: dr,
            n_target: 1,
            n_clutter: 1,
            samples: vec![],
            roc: vec![],
        };
        let a = vec![("d1".to_string(), mk(0.8)), ("d2".to_string(), mk(0.6))];
        let b = vec![("d1".to_string(), mk(0.7)), ("d2".to_string(), mk(0.6))];
        let t = merge_reports(&a).unwrap();
        assert!((t.mean_dr - 0.7).abs() < 1e-12);
        let c = compare_reports(&a, &b).unwrap();
        assert!((c.mean_delta - 0.05).abs() < 1e-12);
        assert!(c.to_csv("pa", "ce").contains("d1,0.800000,0.700000,+0.100000"));
    }
}
