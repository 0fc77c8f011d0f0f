use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use radarllm_core::pipeline::{load_tokens, ManifestLine, RunConfig};
use radarllm_core::training::TokenScoreTable;

const TINY: &str = r#"
seed = 9

[data]
n = 128
m_target = 32
m_clutter = 32

[scene]
n_pulses = 2048
scr_db = 0.0

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
epochs = 2

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

fn cli(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_radarllm"))
        .args(["--config", cfg.to_str().unwrap(), "--dir", dir.join("run").to_str().unwrap(), "--log", "warn"])
        .args(args)
        .env_remove("RLLM_SEED")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn stage_by_stage_chain_and_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for step in ["synth", "features", "train-ref", "score", "finetune", "train-head", "eval", "roc"] {
        ok(d, &[step]);
    }
    let run = d.join("run");
    for f in ["dataset.rlds", "dataset.rlds.meta.json", "tokens.rltk", "scores.rlsc", "report.json", "roc.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    let cfg = RunConfig::from_toml(TINY).unwrap();
    let (tokens, _) = load_tokens(&cfg, &run.join("tokens.rltk")).unwrap();
    let table = TokenScoreTable::load(&run.join("scores.rlsc")).unwrap();
    assert_eq!(table.len() * table.k, tokens.train.len() * tokens.k());
    assert_eq!(table.k, cfg.tokens());

    let lines = ManifestLine::read_all(&run.join("manifest.jsonl")).unwrap();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l.config_hash == cfg.hash() && !l.outputs.is_empty()));

    let ce = run.join("backbone_ce");
    ok(d, &["finetune", "--loss-mode", "plain_ce", "--out", ce.to_str().unwrap()]);
    let pa_report = run.join("report_pa.json");
    let ce_report = run.join("report_ce.json");
    ok(d, &["eval", "--scorer", "backbone", "--out", pa_report.to_str().unwrap()]);
    ok(
        d,
        &[
            "eval",
            "--scorer",
            "backbone",
            "--loss-mode",
            "plain_ce",
            "--backbone",
            ce.to_str().unwrap(),
            "--out",
            ce_report.to_str().unwrap(),
        ],
    );
    let delta = run.join("delta.csv");
    let printed = ok(
        d,
        &[
            "report",
            &format!("scene={}", pa_report.display()),
            "--compare",
            &format!("scene={}", ce_report.display()),
            "--out",
            delta.to_str().unwrap(),
        ],
    );
    let text = fs::read_to_string(&delta).unwrap();
    assert_eq!(printed, text);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "dataset,dr_pa,dr_ce,delta");
    assert!(rows[1].starts_with("scene,"));
    assert!(rows[2].starts_with("mean,,,"));

    let e = cli(d, &["eval", "--scorer", "backbone", "--backbone", ce.to_str().unwrap()]);
    assert_eq!(code(&e), 4, "{}", String::from_utf8_lossy(&e.stderr));
}

#[test]
fn run_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["run"]);
    ok(b.path(), &["run"]);
    let ra = fs::read(a.path().join("run/report.json")).unwrap();
    let rb = fs::read(b.path().join("run/report.json")).unwrap();
    assert_eq!(ra, rb);
    assert!(!ra.is_empty());
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["config"]);
    assert!(out.contains("[finetune]") && out.contains("# hash = "));
    let e = cli(tmp.path(), &["config", "--set", "finetune.alpah=0.5"]);
    assert_eq!(code(&e), 2);
    let e = cli(tmp.path(), &["config", "--set", "detect.pfa=2.0"]);
    assert_eq!(code(&e), 2);
}

#[test]
fn seed_from_environment_changes_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ok(tmp.path(), &["config"]);
    let cfg = tmp.path().join("tiny.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_radarllm"))
        .args(["--config", cfg.to_str().unwrap(), "config"])
        .env("RLLM_SEED", "77")
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 77"), "{text}");
    assert_ne!(base.lines().last(), text.lines().last());
}

#[test]
fn missing_and_mismatched_artifacts_exit_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let e = cli(d, &["features"]);
    assert_eq!(code(&e), 4, "{}", String::from_utf8_lossy(&e.stderr));
    ok(d, &["synth"]);
    let e = cli(d, &["features", "--seed", "10"]);
    assert_eq!(code(&e), 4, "{}", String::from_utf8_lossy(&e.stderr));
    fs::write(d.join("run/garbage.rltk"), b"NOPE").unwrap();
    let e = cli(d, &["train-ref", "--tokens", d.join("run/garbage.rltk").to_str().unwrap()]);
    assert_eq!(code(&e), 4, "{}", String::from_utf8_lossy(&e.stderr));
}

#[test]
fn divergence_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth"]);
    ok(d, &["features"]);
    let e = cli(d, &["train-ref", "--set", "reference.lr=1e300"]);
    assert_eq!(code(&e), 3, "{}", String::from_utf8_lossy(&e.stderr));
}
