#![cfg(feature = "cli")]

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[model]
image_height = 16
image_width = 16
width = 8
heads = 2
norm_groups = 2
[model.task_attention]
heads = 2
[train]
learning_rate = 0.002
effective_batch = 2
grad_accum = 2
stage1_steps = 2
stage2_steps = 1
single_task_steps = 1
checkpoint_every = 0
[data]
samples_per_dataset = 2
eval_samples = 1
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtl-lab"))
        .current_dir(dir)
        .env("MTL_LAB_THREADS", "1")
        .args(["--config", "run.toml"])
        .args(args)
        .output()
        .unwrap()
}

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), CONFIG).unwrap();
    tmp
}

fn summary(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = workspace();
    assert_eq!(run(tmp.path(), &["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(tmp.path(), &["train-single", "--task", "nonsense"]).status.code(), Some(1));
    let out = run(tmp.path(), &["--out", "s2", "train-stage2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage-1 checkpoint"));
    let out = run(tmp.path(), &["--out", "s2", "train-stage2", "--checkpoint", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(tmp.path().join("bad.toml"), "[train]\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mtl-lab")).current_dir(tmp.path()).args(["--config", "bad.toml", "gen-data"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = workspace();
    let checksums = |root: &str| {
        let out = run(tmp.path(), &["--seed", "7", "--data", root, "--out", &format!("{root}-run"), "gen-data"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let s = summary(&tmp.path().join(format!("{root}-run")));
        s["details"]["datasets"].as_array().unwrap().iter().map(|d| d["sha256"].as_str().unwrap().to_string()).collect::<Vec<_>>()
    };
    assert_eq!(checksums("a"), checksums("b"));
}

#[test]
fn pipeline_runs_and_eval_warns_without_all_baselines() {
    let tmp = workspace();
    let ok = |args: &[&str]| {
        let out = run(tmp.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["--out", "gen", "gen-data"]);
    ok(&["--out", "s1", "train-stage1"]);
    ok(&["--out", "s2", "train-stage2", "--checkpoint", "s1/final"]);
    ok(&["--out", "base/depth", "train-single", "--task", "depth"]);
    let out = ok(&["--out", "ev", "eval", "--checkpoint", "s2", "--baselines", "base"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta_m omitted"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert!(report.get("delta_m").is_none());
    assert!(tmp.path().join("ev/attention_trace.csv").is_file());

    ok(&["--out", "va", "viz-attn", "--trace", "ev/attention_trace.csv"]);
    let csv = std::fs::read_to_string(tmp.path().join("va/attention_groups.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 5 * 7 * 6);
    ok(&["--out", "vf", "viz-flow"]);
    assert!(tmp.path().join("vf/flow.png").is_file());
    ok(&["--out", "rep", "report", "ev/metrics.json"]);
    ok(&["--out", "inf", "infer", "--checkpoint", "s2", "--task", "depth", "--frame-a", "data/eval/toy-indoor/000000/frame_i.bin"]);
    assert!(tmp.path().join("inf/prediction.png").is_file());

    for dir in ["gen", "s1", "s2", "base/depth", "ev", "va", "vf", "rep", "inf"] {
        let s = summary(&tmp.path().join(dir));
        assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
        assert!(s["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    }
}
