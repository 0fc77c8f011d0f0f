//! The four-stage run as file-to-file steps. Every step checks that its
//! inputs were produced under the current configuration and appends a line
//! to the run manifest.

mod artifacts;
mod config;

pub use artifacts::{hash_path, sidecar_path, ArtifactMeta, FileHash, ManifestLine, TokenFile, TOKEN_MAGIC};
pub use config::{
    sha256_hex, stage_hash, BackboneSection, DataSection, DetectSection, FeatureSection, FinetuneSection, HeadSection,
    ReferenceSection, RunConfig, SceneSection, Scorer, StageHashes, SEED_ENV,
};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{
    read_dataset, read_echo_csv, segment_echoes, split_dataset, synthesize_scene, write_dataset, Dataset, EchoSeries,
    Label, ObservationVector,
};
use crate::detect::{compare_reports, evaluate, merge_reports, write_roc_csv, DetectionReport, ScoredSample};
use crate::error::{Error, Result};
use crate::features::{extract_batch, patch, FeatureNorm, FeatureTokenBatch};
use crate::models::{AutoencoderHead, BackboneModel, ModelMeta, ReferenceModel};
use crate::training::{
    finetune_backbone, head_target_scores, model_target_scores, score_tokens, train_head, train_reference,
    TokenScoreTable,
};

pub const DATASET_KIND: &str = "dataset";

/// Default artifact locations inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn dataset(&self) -> PathBuf {
        self.at("dataset.rlds")
    }
    pub fn tokens(&self) -> PathBuf {
        self.at("tokens.rltk")
    }
    pub fn reference(&self) -> PathBuf {
        self.at("reference")
    }
    pub fn scores(&self) -> PathBuf {
        self.at("scores.rlsc")
    }
    pub fn backbone(&self) -> PathBuf {
        self.at("backbone")
    }
    pub fn head(&self) -> PathBuf {
        self.at("head")
    }
    pub fn report(&self) -> PathBuf {
        self.at("report.json")
    }
    pub fn roc(&self) -> PathBuf {
        self.at("roc.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.at("manifest.jsonl")
    }
}

/// What a step read and wrote, for the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub stage_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// Runs `step` and appends its manifest line to `manifest`.
pub fn record<F>(manifest: &Path, command: &str, cfg: &RunConfig, step: F) -> Result<StepOutcome>
where
    F: FnOnce() -> Result<StepOutcome>,
{
    let start = Instant::now();
    let out = step()?;
    let hashes = |ps: &[PathBuf]| ps.iter().map(|p| FileHash::of(p)).collect::<Result<Vec<_>>>();
    ManifestLine {
        command: command.to_string(),
        config_hash: cfg.hash(),
        stage_hash: out.stage_hash.clone(),
        inputs: hashes(&out.inputs)?,
        outputs: hashes(&out.outputs)?,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
    .append(manifest)?;
    log::info!("{command}: stage {} in {:.1}s", &out.stage_hash[..12.min(out.stage_hash.len())], start.elapsed().as_secs_f64());
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn mismatch(what: &str, path: &Path, found: &str, expected: &str) -> Error {
    Error::ArtifactMismatch(format!(
        "{what} {} was produced under a different configuration (stage hash {found}, expected {expected})",
        path.display()
    ))
}

fn segments_to_dataset(cfg: &RunConfig, prf_hz: f64, series: &[EchoSeries]) -> Result<Dataset> {
    let mut cells: Vec<Vec<ObservationVector>> = Vec::with_capacity(series.len());
    for s in series {
        let m = match s.cell_kind {
            Label::Target => cfg.data.m_target,
            Label::Clutter => cfg.data.m_clutter,
        };
        cells.push(segment_echoes(s, cfg.data.n, m)?);
    }
    Dataset::from_segments(cfg.data.n, prf_hz, cells)
}

/// Synthesizes `data.scenes` target/clutter cell pairs and segments them.
pub fn synth_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut series = Vec::with_capacity(2 * cfg.data.scenes);
    for i in 0..cfg.data.scenes {
        let (t, c) = synthesize_scene(&cfg.scene_params(i))?;
        series.push(t);
        series.push(c);
    }
    segments_to_dataset(cfg, cfg.scene.prf_hz, &series)
}

pub fn step_synth(cfg: &RunConfig, out: &Path) -> Result<StepOutcome> {
    let d = synth_dataset(cfg)?;
    ensure_parent(out)?;
    write_dataset(out, &d)?;
    let stage = cfg.synth_hash();
    ArtifactMeta::write_for(out, DATASET_KIND, &stage, &cfg.hash(), None)?;
    log::info!(
        "synthesized {} vectors ({} target, {} clutter)",
        d.len(),
        d.count(Label::Target),
        d.count(Label::Clutter)
    );
    Ok(StepOutcome {
        stage_hash: stage,
        inputs: vec![],
        outputs: vec![out.to_path_buf()],
    })
}

/// Segments echoes from a `cell_id,kind,re,im` CSV file.
pub fn step_ingest(cfg: &RunConfig, csv: &Path, out: &Path) -> Result<StepOutcome> {
    let series = read_echo_csv(csv, cfg.scene.prf_hz)?;
    let d = segments_to_dataset(cfg, cfg.scene.prf_hz, &series)?;
    ensure_parent(out)?;
    write_dataset(out, &d)?;
    let source = hash_path(csv)?;
    let stage = cfg.ingest_hash(&source);
    ArtifactMeta::write_for(out, DATASET_KIND, &stage, &cfg.hash(), Some(source))?;
    Ok(StepOutcome {
        stage_hash: stage,
        inputs: vec![csv.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

/// Reads a dataset and checks its provenance, returning the chain root.
/// Also returns the source hash of an ingested dataset (empty otherwise).
pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<(Dataset, String, String)> {
    let meta = ArtifactMeta::read_for(path, DATASET_KIND)?;
    let expected = match &meta.source {
        None => cfg.synth_hash(),
        Some(src) => cfg.ingest_hash(src),
    };
    if meta.stage_hash != expected {
        return Err(mismatch("dataset", path, &meta.stage_hash, &expected));
    }
    Ok((read_dataset(path)?, meta.stage_hash, meta.source.unwrap_or_default()))
}

/// Splits, extracts, normalizes with training statistics and patches.
pub fn build_tokens(cfg: &RunConfig, d: &Dataset, data_hash: &str, source: &str) -> Result<TokenFile> {
    let split = split_dataset(&d.vectors, cfg.data.train_frac, cfg.data.val_frac)?;
    let fc = cfg.feature_config();
    let train = extract_batch(&split.train, &fc)?;
    let norm = if cfg.features.normalize {
        FeatureNorm::fit(&train)?
    } else {
        FeatureNorm::identity()
    };
    let make = |v: &[ObservationVector], name: &str| -> Result<FeatureTokenBatch> {
        if v.is_empty() {
            return Err(Error::EmptyInput(format!("the {name} split is empty")));
        }
        let f: Vec<_> = extract_batch(v, &fc)?.iter().map(|s| norm.apply(s)).collect();
        patch(&f, cfg.features.patch_len)
    };
    let tokens = TokenFile {
        data_hash: data_hash.to_string(),
        source: source.to_string(),
        stage_hash: cfg.features_hash(data_hash),
        config_hash: cfg.hash(),
        train: make(&split.train, "training")?,
        val: make(&split.val, "validation")?,
        test: make(&split.test, "test")?,
        norm,
    };
    if tokens.k() != cfg.tokens() {
        return Err(Error::Validation(format!(
            "features produced K = {} tokens, expected {}",
            tokens.k(),
            cfg.tokens()
        )));
    }
    Ok(tokens)
}

pub fn step_features(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<StepOutcome> {
    let (d, root, source) = load_dataset(cfg, dataset)?;
    let tokens = build_tokens(cfg, &d, &root, &source)?;
    log::info!(
        "tokens: K = {}, train {} / val {} / test {}",
        tokens.k(),
        tokens.train.len(),
        tokens.val.len(),
        tokens.test.len()
    );
    ensure_parent(out)?;
    tokens.save(out)?;
    Ok(StepOutcome {
        stage_hash: tokens.stage_hash,
        inputs: vec![dataset.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

/// Reads a token file and returns it with the expected stage hashes of
/// its chain.
pub fn load_tokens(cfg: &RunConfig, path: &Path) -> Result<(TokenFile, StageHashes)> {
    let t = TokenFile::load(path)?;
    let root = if t.source.is_empty() {
        cfg.synth_hash()
    } else {
        cfg.ingest_hash(&t.source)
    };
    if root != t.data_hash {
        return Err(mismatch("dataset behind token file", path, &t.data_hash, &root));
    }
    let chain = cfg.chain(&t.data_hash);
    if chain.features != t.stage_hash {
        return Err(mismatch("token file", path, &t.stage_hash, &chain.features));
    }
    Ok((t, chain))
}

fn model_meta(cfg: &RunConfig, stage_hash: &str) -> ModelMeta {
    ModelMeta {
        kind: String::new(),
        stage_hash: stage_hash.to_string(),
        config_hash: cfg.hash(),
    }
}

fn check_meta(meta: &ModelMeta, what: &str, path: &Path, expected: &str) -> Result<()> {
    if meta.stage_hash != expected {
        return Err(mismatch(what, path, &meta.stage_hash, expected));
    }
    Ok(())
}

pub fn step_train_ref(cfg: &RunConfig, tokens: &Path, out: &Path) -> Result<StepOutcome> {
    let (t, chain) = load_tokens(cfg, tokens)?;
    let run = train_reference::<f64>(&cfg.reference_model(), &cfg.reference_stage(), &t.val)?;
    log::info!("reference: final validation token CE {:.4}", run.final_ce);
    run.model.save(out, &model_meta(cfg, &chain.reference))?;
    let mut log = csv::Writer::from_path(out.join("history.csv")).map_err(|e| Error::Validation(e.to_string()))?;
    log.write_record(["epoch", "loss"])?;
    for (e, l) in run.history.iter().enumerate() {
        log.write_record([e.to_string(), l.to_string()])?;
    }
    log.flush().map_err(|e| Error::io(out, e))?;
    Ok(StepOutcome {
        stage_hash: chain.reference,
        inputs: vec![tokens.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

pub fn step_score(cfg: &RunConfig, tokens: &Path, reference: &Path, out: &Path) -> Result<StepOutcome> {
    let (t, chain) = load_tokens(cfg, tokens)?;
    let (model, meta) = ReferenceModel::<f64>::load(reference)?;
    check_meta(&meta, "reference checkpoint", reference, &chain.reference)?;
    let table = score_tokens(&model, &t.train, cfg.finetune.alpha, &chain.reference)?;
    ensure_parent(out)?;
    table.save(out)?;
    log::info!("scored {} samples x {} tokens", table.len(), table.k);
    Ok(StepOutcome {
        stage_hash: chain.reference,
        inputs: vec![tokens.to_path_buf(), reference.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

fn has_both_classes(b: &FeatureTokenBatch) -> bool {
    b.labels.contains(&Label::Target) && b.labels.contains(&Label::Clutter)
}

pub fn step_finetune(cfg: &RunConfig, tokens: &Path, scores: &Path, out: &Path) -> Result<StepOutcome> {
    let (t, chain) = load_tokens(cfg, tokens)?;
    let table = TokenScoreTable::load(scores)?;
    if table.reference_checkpoint_id != chain.reference {
        return Err(mismatch("score table", scores, &table.reference_checkpoint_id, &chain.reference));
    }
    let mut model = BackboneModel::<f64>::new(cfg.backbone_model())?;
    let eval = has_both_classes(&t.val).then_some(&t.val);
    let log = finetune_backbone(&mut model, &t.train, &table, &cfg.finetune_config(), eval)?;
    model.save(out, &model_meta(cfg, &chain.finetune))?;
    log.write_csv(&out.join("train_log.csv"))?;
    log.write_token_weights_csv(&out.join("token_weights.csv"), &t.train.origin)?;
    Ok(StepOutcome {
        stage_hash: chain.finetune,
        inputs: vec![tokens.to_path_buf(), scores.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

pub fn load_backbone(path: &Path, chain: &StageHashes) -> Result<BackboneModel<f64>> {
    let (model, meta) = BackboneModel::<f64>::load(path)?;
    check_meta(&meta, "backbone checkpoint", path, &chain.finetune)?;
    Ok(model)
}

pub fn step_train_head(cfg: &RunConfig, tokens: &Path, backbone: &Path, out: &Path) -> Result<StepOutcome> {
    let (t, chain) = load_tokens(cfg, tokens)?;
    let bb = load_backbone(backbone, &chain)?;
    let mut head = AutoencoderHead::<f64>::new(cfg.head_model())?;
    let log = train_head(&bb, &mut head, &t.train, &cfg.head_config())?;
    head.save(out, &model_meta(cfg, &chain.head))?;
    log.write_csv(&out.join("train_log.csv"))?;
    Ok(StepOutcome {
        stage_hash: chain.head,
        inputs: vec![tokens.to_path_buf(), backbone.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

/// Scores the test split and applies the false-alarm-controlled threshold.
pub fn evaluate_run(
    cfg: &RunConfig,
    t: &TokenFile,
    chain: &StageHashes,
    backbone: &BackboneModel<f64>,
    head: Option<&AutoencoderHead<f64>>,
) -> Result<DetectionReport> {
    let (scores, scorer) = match head {
        Some(h) => (head_target_scores(backbone, h, &t.test)?, Scorer::Head),
        None => (model_target_scores(backbone, &t.test, 64)?, Scorer::Backbone),
    };
    let samples: Vec<ScoredSample> = scores
        .iter()
        .zip(&t.test.labels)
        .zip(&t.test.sample_ids)
        .map(|((&score, &label), &sample_id)| ScoredSample { sample_id, label, score })
        .collect();
    let name = match scorer {
        Scorer::Head => "head",
        Scorer::Backbone => "backbone",
    };
    evaluate(&samples, cfg.detect.pfa, name, &chain.eval(cfg, scorer))
}

pub fn step_eval(
    cfg: &RunConfig,
    tokens: &Path,
    backbone: &Path,
    head: Option<&Path>,
    report: &Path,
    roc: Option<&Path>,
) -> Result<StepOutcome> {
    let (t, chain) = load_tokens(cfg, tokens)?;
    let bb = load_backbone(backbone, &chain)?;
    let mut inputs = vec![tokens.to_path_buf(), backbone.to_path_buf()];
    let head_model = match (cfg.detect.scorer, head) {
        (Scorer::Head, Some(p)) => {
            let (h, meta) = AutoencoderHead::<f64>::load(p)?;
            check_meta(&meta, "head checkpoint", p, &chain.head)?;
            inputs.push(p.to_path_buf());
            Some(h)
        }
        (Scorer::Head, None) => {
            return Err(Error::Validation("detect.scorer = head needs a head checkpoint".into()));
        }
        (Scorer::Backbone, _) => None,
    };
    let r = evaluate_run(cfg, &t, &chain, &bb, head_model.as_ref())?;
    log::info!(
        "{}: DR {:.4} at FAR {:.4} (requested {})",
        r.scorer,
        r.detection_rate,
        r.achieved_far,
        r.requested_pfa
    );
    ensure_parent(report)?;
    r.save(report)?;
    let mut outputs = vec![report.to_path_buf()];
    if let Some(p) = roc {
        write_roc_csv(p, &r.roc)?;
        outputs.push(p.to_path_buf());
    }
    Ok(StepOutcome {
        stage_hash: r.config_hash,
        inputs,
        outputs,
    })
}

/// Writes the ROC points of a saved report as CSV.
pub fn step_roc(report: &Path, out: &Path) -> Result<StepOutcome> {
    let r = DetectionReport::load(report)?;
    ensure_parent(out)?;
    write_roc_csv(out, &r.roc)?;
    Ok(StepOutcome {
        stage_hash: r.config_hash,
        inputs: vec![report.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

fn load_named(items: &[(String, PathBuf)]) -> Result<Vec<(String, DetectionReport)>> {
    items
        .iter()
        .map(|(n, p)| Ok((n.clone(), DetectionReport::load(p)?)))
        .collect()
}

/// Writes the per-dataset DR table, or the delta table against `compare`.
pub fn step_report(
    reports: &[(String, PathBuf)],
    compare: Option<(&str, &str, &[(String, PathBuf)])>,
    out: &Path,
) -> Result<StepOutcome> {
    let a = load_named(reports)?;
    let text = match compare {
        None => merge_reports(&a)?.to_csv(),
        Some((a_name, b_name, others)) => compare_reports(&a, &load_named(others)?)?.to_csv(a_name, b_name),
    };
    ensure_parent(out)?;
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    let mut inputs: Vec<PathBuf> = reports.iter().map(|(_, p)| p.clone()).collect();
    if let Some((_, _, others)) = compare {
        inputs.extend(others.iter().map(|(_, p)| p.clone()));
    }
    Ok(StepOutcome {
        stage_hash: String::new(),
        inputs,
        outputs: vec![out.to_path_buf()],
    })
}

/// Runs every stage from synthesis to the ROC file inside `dir`.
pub fn run_all(cfg: &RunConfig, dir: &RunDir) -> Result<DetectionReport> {
    fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    let m = dir.manifest();
    record(&m, "synth", cfg, || step_synth(cfg, &dir.dataset()))?;
    record(&m, "features", cfg, || step_features(cfg, &dir.dataset(), &dir.tokens()))?;
    record(&m, "train-ref", cfg, || step_train_ref(cfg, &dir.tokens(), &dir.reference()))?;
    record(&m, "score", cfg, || step_score(cfg, &dir.tokens(), &dir.reference(), &dir.scores()))?;
    record(&m, "finetune", cfg, || step_finetune(cfg, &dir.tokens(), &dir.scores(), &dir.backbone()))?;
    let head = match cfg.detect.scorer {
        Scorer::Head => {
            record(&m, "train-head", cfg, || step_train_head(cfg, &dir.tokens(), &dir.backbone(), &dir.head()))?;
            Some(dir.head())
        }
        Scorer::Backbone => None,
    };
    record(&m, "eval", cfg, || {
        step_eval(cfg, &dir.tokens(), &dir.backbone(), head.as_deref(), &dir.report(), Some(&dir.roc()))
    })?;
    DetectionReport::load(&dir.report())
}
