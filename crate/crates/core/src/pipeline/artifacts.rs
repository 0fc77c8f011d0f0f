//! Artifact containers shared by the pipeline stages: the token file, JSON
//! provenance sidecars and the append-only run manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::io::{create, flush, label_from, read_bytes, Reader};
use crate::data::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::features::{token_origins, FeatureNorm, FeatureTokenBatch};
use crate::models::hex;

pub const TOKEN_MAGIC: [u8; 4] = *b"RLTK";

/// Normalized, patched features of the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFile {
    /// Hash of the dataset stage the chain starts from.
    pub data_hash: String,
    /// Content hash of the ingested source file; empty for synthetic data.
    pub source: String,
    pub stage_hash: String,
    pub config_hash: String,
    pub norm: FeatureNorm,
    pub train: FeatureTokenBatch,
    pub val: FeatureTokenBatch,
    pub test: FeatureTokenBatch,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader, path: &Path, what: &str) -> Result<String> {
    let n = r.u32(what)? as usize;
    String::from_utf8(r.take(n, what)?.to_vec())
        .map_err(|_| Error::Validation(format!("{}: {what} is not UTF-8", path.display())))
}

impl TokenFile {
    pub fn k(&self) -> usize {
        self.train.k
    }

    pub fn l(&self) -> usize {
        self.train.l
    }

    /// `magic "RLTK" | version u16 | K u32 | L u32 | 5 x feature length
    /// u32 | 5 x mean f64 | 5 x std f64 | data hash | source |
    /// stage hash | config hash |
    /// train, val, test counts u64`, strings as `len u32 + utf8`; then per
    /// sample `id u64 | label u8 | K*L x f64`, splits in that order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (k, l) = (self.k(), self.l());
        for b in [&self.val, &self.test] {
            if (b.k, b.l, b.feature_lens) != (k, l, self.train.feature_lens) {
                return Err(Error::Validation("token splits disagree on K, L or feature lengths".into()));
            }
        }
        let n = self.train.len() + self.val.len() + self.test.len();
        let mut out = Vec::with_capacity(160 + n * (9 + 8 * k * l));
        out.extend_from_slice(&TOKEN_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(l as u32).to_le_bytes());
        for f in self.train.feature_lens {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_str(&mut out, &self.data_hash);
        put_str(&mut out, &self.source);
        put_str(&mut out, &self.stage_hash);
        put_str(&mut out, &self.config_hash);
        for b in [&self.train, &self.val, &self.test] {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        }
        for b in [&self.train, &self.val, &self.test] {
            for i in 0..b.len() {
                out.extend_from_slice(&b.sample_ids[i].to_le_bytes());
                out.push(b.labels[i] as u8);
                for v in b.sample(i) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, buf);
        r.header(TOKEN_MAGIC)?;
        let k = r.u32("K")? as usize;
        let l = r.u32("L")? as usize;
        let mut feature_lens = [0usize; 5];
        for f in feature_lens.iter_mut() {
            *f = r.u32("feature length")? as usize;
        }
        let origin = token_origins(&feature_lens, l);
        if origin.len() != k || l == 0 {
            return Err(Error::Validation(format!(
                "{}: K = {k} does not match feature lengths {feature_lens:?} at L = {l}",
                path.display()
            )));
        }
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for v in mean.iter_mut().chain(std.iter_mut()) {
            *v = r.f64("normalization")?;
        }
        let data_hash = get_str(&mut r, path, "data hash")?;
        let source = get_str(&mut r, path, "source")?;
        let stage_hash = get_str(&mut r, path, "stage hash")?;
        let config_hash = get_str(&mut r, path, "config hash")?;
        let mut counts = [0usize; 3];
        for c in counts.iter_mut() {
            *c = r.u64("split count")? as usize;
        }
        let mut splits = Vec::with_capacity(3);
        for (s, &count) in counts.iter().enumerate() {
            let mut b = FeatureTokenBatch::empty(k, l, feature_lens, origin.clone());
            for i in 0..count {
                let what = format!("split {s} sample {i}");
                b.sample_ids.push(r.u64(&what)?);
                b.labels.push(label_from(r.u8(&what)?, path)?);
                let raw = r.take((k * l).checked_mul(8).unwrap_or(usize::MAX), &what)?;
                b.tokens
                    .extend(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))));
            }
            splits.push(b);
        }
        r.finish()?;
        let mut it = splits.into_iter();
        Ok(TokenFile {
            data_hash,
            source,
            stage_hash,
            config_hash,
            norm: FeatureNorm { mean, std },
            train: it.next().expect("three splits"),
            val: it.next().expect("three splits"),
            test: it.next().expect("three splits"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = create(path)?;
        flush(path, w, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_bytes(path)?)
    }
}

/// Provenance of a file artifact whose own format has no room for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub kind: String,
    pub stage_hash: String,
    pub config_hash: String,
    /// SHA-256 of the artifact bytes.
    pub sha256: String,
    /// Content hash of the external file an ingested dataset came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

impl ArtifactMeta {
    /// Hashes `path` and writes the sidecar next to it.
    pub fn write_for(path: &Path, kind: &str, stage_hash: &str, config_hash: &str, source: Option<String>) -> Result<ArtifactMeta> {
        let meta = ArtifactMeta {
            kind: kind.to_string(),
            stage_hash: stage_hash.to_string(),
            config_hash: config_hash.to_string(),
            sha256: hash_path(path)?,
            source,
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&side, e))?;
        Ok(meta)
    }

    /// Reads the sidecar of `path` and checks its kind and content hash.
    pub fn read_for(path: &Path, kind: &str) -> Result<ArtifactMeta> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ArtifactMeta = serde_json::from_str(&text)?;
        if meta.kind != kind {
            return Err(Error::ArtifactMismatch(format!(
                "{} holds a {} artifact, expected {kind}",
                path.display(),
                meta.kind
            )));
        }
        let actual = hash_path(path)?;
        if actual != meta.sha256 {
            return Err(Error::ArtifactMismatch(format!(
                "{} changed after it was written (sha256 {actual}, recorded {})",
                path.display(),
                meta.sha256
            )));
        }
        Ok(meta)
    }
}

/// SHA-256 of a file, or of every file in a directory taken in name order
/// with the names mixed in.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        names.sort();
        for p in names {
            h.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
            h.update([0]);
            h.update(hash_path(&p)?.as_bytes());
        }
    } else {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<FileHash> {
        Ok(FileHash {
            path: path.display().to_string(),
            sha256: hash_path(path)?,
        })
    }
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub command: String,
    pub config_hash: String,
    pub stage_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
}

impl ManifestLine {
    pub fn append(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(self)? + "\n";
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<ManifestLine>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn batch(n: usize, id0: u64) -> FeatureTokenBatch {
        let lens = [3, 3, 3, 3, 3];
        let origin = token_origins(&lens, 2);
        let mut b = FeatureTokenBatch::empty(origin.len(), 2, lens, origin);
        for i in 0..n {
            b.sample_ids.push(id0 + i as u64);
            b.labels.push(if i % 2 == 0 { Label::Target } else { Label::Clutter });
            b.tokens.extend((0..20).map(|j| (i * 20 + j) as f64 * 0.25 - 3.0));
        }
        b
    }

    fn file() -> TokenFile {
        TokenFile {
            data_hash: "data".into(),
            source: String::new(),
            stage_hash: "stage".into(),
            config_hash: "cfg".into(),
            norm: FeatureNorm {
                mean: [0.5, 1.0, -2.0, 3.0, 0.0],
                std: [1.0, 2.0, 0.5, 1.5, 1.0],
            },
            train: batch(3, 0),
            val: batch(2, 3),
            test: batch(0, 5),
        }
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.rltk");
        let f = file();
        f.save(&p).unwrap();
        assert_eq!(TokenFile::load(&p).unwrap(), f);
    }

    #[test]
    fn token_file_errors_are_distinct() {
        let p = Path::new("t.rltk");
        let bytes = file().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TokenFile::from_bytes(p, &bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(TokenFile::from_bytes(p, &bad), Err(Error::Version { .. })));
        assert!(matches!(
            TokenFile::from_bytes(p, &bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn sidecar_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.bin");
        fs::write(&p, b"abc").unwrap();
        let m = ArtifactMeta::write_for(&p, "dataset", "s", "c", None).unwrap();
        assert_eq!(ArtifactMeta::read_for(&p, "dataset").unwrap(), m);
        assert!(matches!(ArtifactMeta::read_for(&p, "tokens"), Err(Error::ArtifactMismatch(_))));
        fs::write(&p, b"abd").unwrap();
        assert!(matches!(ArtifactMeta::read_for(&p, "dataset"), Err(Error::ArtifactMismatch(_))));
    }

    #[test]
    fn directory_hash_depends_on_names_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), b"1").unwrap();
        fs::write(dir.path().join("b"), b"2").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        assert_eq!(h1, hash_path(dir.path()).unwrap());
        fs::write(dir.path().join("b"), b"3").unwrap();
        assert_ne!(h1, hash_path(dir.path()).unwrap());
    }

    #[test]
    fn manifest_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.jsonl");
        let line = ManifestLine {
            command: "synth".into(),
            config_hash: "c".into(),
            stage_hash: "s".into(),
            inputs: vec![],
            outputs: vec![FileHash {
                path: "x".into(),
                sha256: "y".into(),
            }],
            wall_time_s: 0.5,
        };
        line.append(&p).unwrap();
        line.append(&p).unwrap();
        assert_eq!(ManifestLine::read_all(&p).unwrap(), vec![line.clone(), line]);
    }
}
