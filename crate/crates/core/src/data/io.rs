//! Little-endian binary containers for datasets and echo series, plus CSV
//! import/export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Complex, Dataset, EchoSeries, Label, ObservationVector, Source};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"RLLM";
pub const SERIES_MAGIC: [u8; 4] = *b"RLLS";
pub const FORMAT_VERSION: u16 = 1;

pub(crate) struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, buf: &'a [u8]) -> Self {
        Reader { path, buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("need {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice length checked"))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn complex(&mut self, n: usize, what: &str) -> Result<Vec<Complex>> {
        let raw = self.take(n.checked_mul(16).unwrap_or(usize::MAX), what)?;
        Ok(raw
            .chunks_exact(16)
            .map(|c| {
                Complex::new(
                    f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect())
    }

    pub(crate) fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.array::<4>("magic")?;
        if found != magic {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: magic,
                found,
            });
        }
        let version = self.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: self.path.to_path_buf(),
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Validation(format!(
                "{}: {} trailing bytes",
                self.path.display(),
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn put_complex(out: &mut Vec<u8>, values: &[Complex]) {
    for z in values {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
}

pub(crate) fn label_from(code: u8, path: &Path) -> Result<Label> {
    Label::from_index(code).ok_or_else(|| Error::Validation(format!("{}: invalid label byte {code}", path.display())))
}

pub(crate) fn flush(path: &Path, mut w: BufWriter<File>, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let w = create(path)?;
    let mut out = Vec::with_capacity(22 + d.len() * (13 + 16 * d.n));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.n as u32).to_le_bytes());
    out.extend_from_slice(&(d.len() as u32).to_le_bytes());
    out.extend_from_slice(&d.prf_hz.to_le_bytes());
    for v in &d.vectors {
        if v.values.len() != d.n {
            return Err(Error::Validation(format!(
                "vector {} has length {}, dataset N is {}",
                v.sample_id,
                v.values.len(),
                d.n
            )));
        }
        out.extend_from_slice(&v.sample_id.to_le_bytes());
        out.push(v.label as u8);
        out.extend_from_slice(&v.time_index.to_le_bytes());
        put_complex(&mut out, &v.values);
    }
    flush(path, w, &out)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = read_bytes(path)?;
    let mut r = Reader { path, buf: &buf, pos: 0 };
    r.header(DATASET_MAGIC)?;
    let n = r.u32("N")? as usize;
    let count = r.u32("count")? as usize;
    let prf_hz = r.f64("prf")?;
    let mut vectors = Vec::with_capacity(count.min(buf.len() / 16 + 1));
    for i in 0..count {
        let what = format!("vector {i}");
        let sample_id = r.u64(&what)?;
        let label = label_from(r.u8(&what)?, path)?;
        let time_index = r.u32(&what)?;
        let values = r.complex(n, &what)?;
        vectors.push(ObservationVector {
            values,
            label,
            sample_id,
            time_index,
        });
    }
    r.finish()?;
    Ok(Dataset { n, prf_hz, vectors })
}

/// Echo-series container: magic `RLLS`, version u16, count u32, prf f64;
/// per series: cell_id u32, cell kind u8, source u8 (0 synthetic,
/// 1 ingested), length u64, then interleaved (I, Q) f64 pairs.
pub fn write_series(path: &Path, series: &[EchoSeries]) -> Result<()> {
    let prf = series.first().map_or(1.0, |s| s.prf_hz);
    if series.iter().any(|s| s.prf_hz != prf) {
        return Err(Error::Validation("all series in one file must share a prf".into()));
    }
    let w = create(path)?;
    let mut out = Vec::new();
    out.extend_from_slice(&SERIES_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(series.len() as u32).to_le_bytes());
    out.extend_from_slice(&prf.to_le_bytes());
    for s in series {
        out.extend_from_slice(&s.cell_id.to_le_bytes());
        out.push(s.cell_kind as u8);
        out.push(match s.source {
            Source::Synthetic => 0,
            Source::Ingested => 1,
        });
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        put_complex(&mut out, &s.samples);
    }
    flush(path, w, &out)
}

pub fn read_series(path: &Path) -> Result<Vec<EchoSeries>> {
    let buf = read_bytes(path)?;
    let mut r = Reader { path, buf: &buf, pos: 0 };
    r.header(SERIES_MAGIC)?;
    let count = r.u32("count")? as usize;
    let prf_hz = r.f64("prf")?;
    let mut out = Vec::new();
    for i in 0..count {
        let what = format!("series {i}");
        let cell_id = r.u32(&what)?;
        let cell_kind = label_from(r.u8(&what)?, path)?;
        let source = match r.u8(&what)? {
            0 => Source::Synthetic,
            1 => Source::Ingested,
            b => return Err(Error::Validation(format!("{}: invalid source byte {b}", path.display()))),
        };
        let len = r.u64(&what)? as usize;
        let samples = r.complex(len, &what)?;
        out.push(EchoSeries {
            samples,
            prf_hz,
            cell_kind,
            cell_id,
            source,
        });
    }
    r.finish()?;
    Ok(out)
}

/// One row per vector: `id,label,time_index,re_0,im_0,...`.
pub fn write_dataset_csv(path: &Path, d: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["id".to_string(), "label".into(), "time_index".into()];
    for i in 0..d.n {
        header.push(format!("re_{i}"));
        header.push(format!("im_{i}"));
    }
    w.write_record(&header)?;
    for v in &d.vectors {
        let mut row = vec![v.sample_id.to_string(), (v.label as u8).to_string(), v.time_index.to_string()];
        for z in &v.values {
            row.push(z.re.to_string());
            row.push(z.im.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(serde::Deserialize)]
struct EchoRow {
    cell_id: u32,
    kind: Label,
    re: f64,
    im: f64,
}

/// Reads externally converted echoes from CSV with columns
/// `cell_id,kind,re,im` (kind is `target` or `clutter`), rows in pulse
/// order within each cell.
pub fn read_echo_csv(path: &Path, prf_hz: f64) -> Result<Vec<EchoSeries>> {
    if !(prf_hz > 0.0 && prf_hz.is_finite()) {
        return Err(Error::Validation(format!("prf must be positive, got {prf_hz}")));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| with_path(e, path))?;
    let mut cells: BTreeMap<u32, EchoSeries> = BTreeMap::new();
    for row in rdr.deserialize::<EchoRow>() {
        let row = row.map_err(|e| with_path(e, path))?;
        if !(row.re.is_finite() && row.im.is_finite()) {
            return Err(Error::NonFinite(format!("cell {} in {}", row.cell_id, path.display())));
        }
        let cell = cells.entry(row.cell_id).or_insert_with(|| EchoSeries {
            samples: Vec::new(),
            prf_hz,
            cell_kind: row.kind,
            cell_id: row.cell_id,
            source: Source::Ingested,
        });
        if cell.cell_kind != row.kind {
            return Err(Error::Validation(format!("cell {} changes kind mid-series", row.cell_id)));
        }
        cell.samples.push(Complex::new(row.re, row.im));
    }
    if cells.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no echo rows", path.display())));
    }
    Ok(cells.into_values().collect())
}

fn with_path(e: csv::Error, path: &Path) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}
