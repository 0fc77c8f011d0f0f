use std::fs;

use radarllm_core::detect::DetectionReport;
use radarllm_core::pipeline::*;
use radarllm_core::training::TokenScoreTable;
use radarllm_core::Error;

const TINY: &str = r#"
seed = 5

[data]
n = 128
m_target = 32
m_clutter = 32

[scene]
n_pulses = 2048
scr_db = 3.0

[features]
window_len = 32
hop = 8
patch_len = 16

[reference]
d_model = 16
heads = 2
layers = 1
ffn_hidden = 32
head_hidden = 8
epochs = 3

[backbone]
width = 16
layers = 1
heads = 2
ffn_hidden = 32
lora_rank = 2
head_hidden = 8

[finetune]
epochs = 2

[head]
ladder = [8, 4]
fc_hidden = 8
epochs = 2

[detect]
pfa = 0.05
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

#[test]
fn full_chain_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let cfg = tiny();
    let report = run_all(&cfg, &run).unwrap();
    for p in [run.dataset(), run.tokens(), run.scores(), run.report(), run.roc()] {
        assert!(p.is_file(), "{} missing", p.display());
    }
    for p in [run.reference(), run.backbone(), run.head()] {
        assert!(p.join("manifest.json").is_file(), "{} missing", p.display());
    }
    assert!(run.backbone().join("train_log.csv").is_file());
    assert!(run.backbone().join("token_weights.csv").is_file());

    let (tokens, chain) = load_tokens(&cfg, &run.tokens()).unwrap();
    assert_eq!(tokens.k(), cfg.tokens());
    assert_eq!(tokens.k(), 40);
    let table = TokenScoreTable::load(&run.scores()).unwrap();
    assert_eq!(table.len() * table.k, tokens.train.len() * tokens.k());
    assert_eq!(report.config_hash, chain.eval(&cfg, Scorer::Head));
    assert_eq!(report.scorer, "head");
    assert_eq!(report.n_target + report.n_clutter, tokens.test.len());

    let lines = ManifestLine::read_all(&run.manifest()).unwrap();
    let cmds: Vec<&str> = lines.iter().map(|l| l.command.as_str()).collect();
    assert_eq!(cmds, ["synth", "features", "train-ref", "score", "finetune", "train-head", "eval"]);
    assert!(lines.iter().all(|l| l.config_hash == cfg.hash()));
    assert_eq!(lines[1].inputs[0].sha256, lines[0].outputs[0].sha256);
}

#[test]
fn chained_stage_refuses_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let cfg = tiny();
    step_synth(&cfg, &run.dataset()).unwrap();
    step_features(&cfg, &run.dataset(), &run.tokens()).unwrap();

    let mut other = cfg.clone();
    other.scene.clutter_shape_nu = 2.0;
    let e = step_features(&other, &run.dataset(), &dir.path().join("t2.rltk")).unwrap_err();
    assert!(matches!(e, Error::ArtifactMismatch(_)), "{e}");
    let e = step_train_ref(&other, &run.tokens(), &run.reference()).unwrap_err();
    assert!(matches!(e, Error::ArtifactMismatch(_)), "{e}");

    let mut patchy = cfg.clone();
    patchy.features.patch_len = 32;
    assert!(matches!(load_tokens(&patchy, &run.tokens()), Err(Error::ArtifactMismatch(_))));

    step_train_ref(&cfg, &run.tokens(), &run.reference()).unwrap();
    let mut refd = cfg.clone();
    refd.reference.epochs = 4;
    let e = step_score(&refd, &run.tokens(), &run.reference(), &run.scores()).unwrap_err();
    assert!(matches!(e, Error::ArtifactMismatch(_)), "{e}");

    step_score(&cfg, &run.tokens(), &run.reference(), &run.scores()).unwrap();
    let mut ce = cfg.clone();
    ce.finetune.alpha = 0.5;
    step_finetune(&ce, &run.tokens(), &run.scores(), &dir.path().join("bb_ce")).unwrap();
    let e = step_eval(&cfg, &run.tokens(), &dir.path().join("bb_ce"), None, &run.report(), None).unwrap_err();
    assert!(matches!(e, Error::ArtifactMismatch(_)), "{e}");
}

#[test]
fn edited_dataset_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let cfg = tiny();
    step_synth(&cfg, &run.dataset()).unwrap();
    let mut bytes = fs::read(run.dataset()).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(run.dataset(), bytes).unwrap();
    assert!(matches!(
        step_features(&cfg, &run.dataset(), &run.tokens()),
        Err(Error::ArtifactMismatch(_))
    ));
}

#[test]
fn ingested_echoes_flow_through_features() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let d = synth_dataset(&cfg).unwrap();
    let csv = dir.path().join("echo.csv");
    let mut text = String::from("cell_id,kind,re,im\n");
    for (cell, kind) in [(0u32, "target"), (1, "clutter")] {
        for i in 0..1024 {
            let v = &d.vectors[if kind == "target" { 0 } else { d.len() - 1 }].values;
            let z = v[i % v.len()] * (1.0 + i as f64 / 1024.0);
            text += &format!("{cell},{kind},{},{}\n", z.re, z.im);
        }
    }
    fs::write(&csv, text).unwrap();
    let ds = dir.path().join("ingested.rlds");
    let out = step_ingest(&cfg, &csv, &ds).unwrap();
    assert_ne!(out.stage_hash, cfg.synth_hash());
    let tk = dir.path().join("ingested.rltk");
    step_features(&cfg, &ds, &tk).unwrap();
    let (t, chain) = load_tokens(&cfg, &tk).unwrap();
    assert_eq!(chain.data, out.stage_hash);
    assert!(!t.source.is_empty());
}

#[test]
fn roc_and_report_steps() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let mut cfg = tiny();
    cfg.detect.scorer = Scorer::Backbone;
    run_all(&cfg, &run).unwrap();
    assert!(!run.head().exists());
    let roc2 = dir.path().join("roc2.csv");
    step_roc(&run.report(), &roc2).unwrap();
    assert_eq!(fs::read(&roc2).unwrap(), fs::read(run.roc()).unwrap());

    let r = DetectionReport::load(&run.report()).unwrap();
    let table = dir.path().join("table.csv");
    let named = vec![("a".to_string(), run.report()), ("b".to_string(), run.report())];
    step_report(&named, None, &table).unwrap();
    let text = fs::read_to_string(&table).unwrap();
    assert!(text.lines().last().unwrap().starts_with("mean,"), "{text}");
    assert!(text.contains(&format!("{:.6}", r.detection_rate)), "{text}");

    let delta = dir.path().join("delta.csv");
    step_report(&named, Some(("pa", "ce", &named)), &delta).unwrap();
    let text = fs::read_to_string(&delta).unwrap();
    assert!(text.starts_with("dataset,dr_pa,dr_ce,delta"), "{text}");
}
