//! Radar echo series, fixed-length observation windows, and chronological
//! dataset splits.

pub(crate) mod io;
mod synth;

pub use io::{
    read_dataset, read_echo_csv, read_series, write_dataset, write_dataset_csv, write_series,
    DATASET_MAGIC, FORMAT_VERSION, SERIES_MAGIC,
};
pub use synth::{synthesize_scene, SceneParams};

use serde::{Deserialize, Serialize};

use crate::error::{validate, Error, Result};

pub type Complex = num_complex::Complex64;

/// Hypothesis label of a range cell. The discriminant is the class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target = 0,
    Clutter = 1,
}

impl Label {
    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Label> {
        match i {
            0 => Some(Label::Target),
            1 => Some(Label::Clutter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Ingested,
}

/// The complex echo sequence recorded in one range cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoSeries {
    pub samples: Vec<Complex>,
    pub prf_hz: f64,
    pub cell_kind: Label,
    pub cell_id: u32,
    pub source: Source,
}

impl EchoSeries {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// An `N`-sample window cut from an [`EchoSeries`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVector {
    pub values: Vec<Complex>,
    pub label: Label,
    pub sample_id: u64,
    /// 1-based window index `i` within its cell.
    pub time_index: u32,
}

/// Observation vectors of a common length sharing one pulse repetition
/// frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub prf_hz: f64,
    pub vectors: Vec<ObservationVector>,
}

impl Dataset {
    /// Collects segments from several cells and renumbers `sample_id`
    /// densely in the given order.
    pub fn from_segments(n: usize, prf_hz: f64, cells: Vec<Vec<ObservationVector>>) -> Result<Dataset> {
        validate(prf_hz > 0.0 && prf_hz.is_finite(), || format!("prf must be positive, got {prf_hz}"))?;
        let mut vectors: Vec<ObservationVector> = cells.into_iter().flatten().collect();
        for (i, v) in vectors.iter_mut().enumerate() {
            validate(v.values.len() == n, || {
                format!("vector {} has length {}, expected {n}", v.sample_id, v.values.len())
            })?;
            v.sample_id = i as u64;
        }
        Ok(Dataset { n, prf_hz, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.vectors.iter().filter(|v| v.label == label).count()
    }
}

/// Cuts `x_i = [x(M(i-1)+m)]_{m=1..N}` for every window lying fully inside
/// the series. Sample ids are the zero-based window positions; callers
/// assembling a dataset renumber them.
pub fn segment_echoes(series: &EchoSeries, n: usize, m: usize) -> Result<Vec<ObservationVector>> {
    validate(n >= 1 && m >= 1, || format!("window length and step must be >= 1 (N={n}, M={m})"))?;
    if series.len() < n {
        return Err(Error::EmptyInput(format!(
            "series of length {} is shorter than the window length {n}",
            series.len()
        )));
    }
    let count = (series.len() - n) / m + 1;
    Ok((0..count)
        .map(|i| ObservationVector {
            values: series.samples[i * m..i * m + n].to_vec(),
            label: series.cell_kind,
            sample_id: i as u64,
            time_index: (i + 1) as u32,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<ObservationVector>,
    pub val: Vec<ObservationVector>,
    pub test: Vec<ObservationVector>,
}

/// Chronological split per cell label. With `n_t` the largest time index
/// of a group, windows with `time_index <= floor(train_frac * n_t)` train,
/// those up to `floor((train_frac + val_frac) * n_t)` validate, and the rest
/// test. Input order is kept within each part.
pub fn split_dataset(vectors: &[ObservationVector], train_frac: f64, val_frac: f64) -> Result<Split> {
    validate(
        train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0,
        || format!("fractions must satisfy 0 < train, val and train + val < 1 (got {train_frac}, {val_frac})"),
    )?;
    if vectors.is_empty() {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    let mut max_t = std::collections::BTreeMap::<Label, u32>::new();
    for v in vectors {
        let e = max_t.entry(v.label).or_insert(0);
        *e = (*e).max(v.time_index);
    }
    let bound = |frac: f64, n_t: u32| (frac * n_t as f64 + 1e-9).floor() as u32;
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for v in vectors {
        let n_t = max_t[&v.label];
        let b1 = bound(train_frac, n_t);
        let b2 = bound(train_frac + val_frac, n_t);
        let part = if v.time_index <= b1 {
            &mut split.train
        } else if v.time_index <= b2 {
            &mut split.val
        } else {
            &mut split.test
        };
        part.push(v.clone());
    }
    Ok(split)
}
