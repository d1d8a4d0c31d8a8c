use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1
seed = 5
[synth]
users_per_group = 30
[corpus]
test_fraction = 0.2
[pretrain]
lr = 3e-3
epochs = 1
grad_accum = 1
[train]
epochs = 1
selector_lr = 1e-2
predictor_lr = 1e-4
[finetune]
lr = 1e-4
epochs = 1
"#;

fn hetlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetlm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = hetlm(args);
    assert!(
        out.status.success(),
        "hetlm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    Workspace { _dir: dir, root, config }
}

#[test]
fn pipeline_runs_end_to_end() {
    let w = workspace();
    let cfg = s(&w.config);
    let (data, pre, het, ev) = (w.root.join("data"), w.root.join("pre"), w.root.join("het"), w.root.join("ev"));
    ok(&["synth", "--config", cfg, "--out", s(&data)]);
    ok(&["pretrain", "--config", cfg, "--data", s(&data), "--out", s(&pre)]);
    ok(&["hetlm-train", "--config", cfg, "--data", s(&data), "--pretrained", s(&pre), "--k-init", "3", "--out", s(&het)]);
    for f in ["steps.csv", "epochs.csv", "clusters.json", "assignments.csv", "summary.json"] {
        assert!(het.join(f).exists(), "missing {f}");
    }
    ok(&["evaluate", "--config", cfg, "--model", s(&het.join("model")), "--data", s(&data), "--out", s(&ev)]);
    let report = ev.join("report.json");
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(parsed["combined"]["page_gen"]["hr"].is_number(), "{parsed}");

    let cmp = w.root.join("cmp");
    ok(&["compare", "--candidate", s(&report), "--baseline", s(&report), "--out", s(&cmp)]);
    let scores: serde_json::Value = serde_json::from_slice(&std::fs::read(cmp.join("composite.json")).unwrap()).unwrap();
    assert_eq!(scores["overall_composite"], 0.0);
}

#[test]
fn unknown_subcommand_fails() {
    let out = hetlm(&["frobnicate", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_structured_error() {
    let w = workspace();
    let out = hetlm(&["pretrain", "--data", s(&w.root.join("absent")), "--out", s(&w.root.join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());
}

#[test]
fn bad_config_is_rejected() {
    let w = workspace();
    let bad = w.root.join("bad.toml");
    std::fs::write(&bad, "schema_version = 99\n").unwrap();
    let out = hetlm(&["synth", "--config", s(&bad), "--out", s(&w.root.join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_and_pretrain_are_reproducible() {
    let w = workspace();
    let cfg = s(&w.config);
    for run in ["a", "b"] {
        let base = w.root.join(run);
        ok(&["synth", "--config", cfg, "--out", s(&base.join("data"))]);
        ok(&["pretrain", "--config", cfg, "--data", s(&base.join("data")), "--out", s(&base.join("pre"))]);
    }
    for f in ["data/train.jsonl", "data/test.jsonl", "data/vocab.json", "pre/curves.csv", "pre/summary.json"] {
        assert_eq!(
            std::fs::read(w.root.join("a").join(f)).unwrap(),
            std::fs::read(w.root.join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}
