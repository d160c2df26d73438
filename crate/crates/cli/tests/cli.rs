use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tirg_core::{Model, RunConfig};

const SMALL: &str = r#"
[dataset]
n_base = 12
n_queries = 60
canvas_px = 18

[model.image]
canvas_px = 18
channels = [4, 6]
embed_dim = 12

[model.text]
embed_dim = 6
hidden_dim = 8

[model.composition]
strategy = "tirg"

[train]
iterations = 6
batch_size = 4
eval_every = 3
identity_queries = 20
"#;

fn tirg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tirg")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A temp dir holding `small.toml` and a generated dataset under `data/`.
fn workspace() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let out = tirg(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (dir, cfg, data)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_echoes_counts_and_snapshots_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = tirg(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("queries     60"), "{text}");
    assert!(text.contains("total images 144"), "{text}");
    let snap = RunConfig::load(&dir.path().join("d/config.toml")).unwrap();
    assert_eq!(snap, RunConfig::from_toml(SMALL).unwrap());
}

#[test]
fn generate_twice_gives_identical_trees() {
    let (dir, cfg, data) = workspace();
    let again = dir.path().join("again");
    assert_eq!(code(&tirg(&["generate", "--config", s(&cfg), "--out", s(&again)])), 0);
    assert!(tree(&data) == tree(&again));
}

#[test]
fn generate_rejects_bad_config_and_unwritable_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[dataset]\nn_bases = 3\n").unwrap();
    let out = tirg(&["generate", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("n_bases"), "{}", stderr(&out));

    let file = dir.path().join("file");
    fs::write(&file, "").unwrap();
    let out = tirg(&["generate", "--n-base", "3", "--n-queries", "6", "--out", s(&file.join("sub"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn train_writes_checkpoint_log_and_summary() {
    let (dir, cfg, data) = workspace();
    let run = dir.path().join("run");
    let out = tirg(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("R@1"));
    for f in ["checkpoint.bin", "log.jsonl", "config.toml", "eval.json", "summary.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let iters: Vec<u64> = fs::read_to_string(run.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, vec![0, 3, 6]);
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let (dir, cfg, data) = workspace();
    let run = dir.path().join("run");
    let out = tirg(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--iterations", "0", "--seed", "7",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let snap = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(snap.train.iterations, 0);
    let fresh = dir.path().join("fresh.bin");
    Model::new(snap.model, 7).unwrap().save(&fresh).unwrap();
    assert_eq!(fs::read(fresh).unwrap(), fs::read(run.join("checkpoint.bin")).unwrap());
}

#[test]
fn seed_sweep_aggregates_mean_and_std() {
    let (dir, cfg, data) = workspace();
    let run = dir.path().join("sweep");
    let out = tirg(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--seeds", "2", "--iterations", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(run.join("seed-0/checkpoint.bin").exists() && run.join("seed-1/log.jsonl").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let r1 = &summary["recall"]["r1"];
    let vals: Vec<f64> = r1["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(vals.len(), 2);
    assert!((r1["mean"].as_f64().unwrap() - (vals[0] + vals[1]) / 2.0).abs() < 1e-9);
    assert!(stdout(&out).contains("±"));
}

#[test]
fn train_without_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tirg(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_prints_table_and_full_cutoff_is_100() {
    let (dir, cfg, data) = workspace();
    let run = dir.path().join("run");
    assert_eq!(code(&tirg(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)])), 0);
    let report_dir = dir.path().join("report");
    let out = tirg(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--data",
        s(&data),
        "--ks",
        "1,5,72",
        "--out",
        s(&report_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["recall"]["72"].as_f64(), Some(100.0));
    assert!(report_dir.join("config.toml").exists());
    assert!(stdout(&out).contains("100.0"), "{}", stdout(&out));
}

#[test]
fn eval_with_mismatched_strategy_fails() {
    let (dir, cfg, data) = workspace();
    let run = dir.path().join("run");
    assert_eq!(code(&tirg(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--iterations", "0"])), 0);
    let other = dir.path().join("concat.toml");
    fs::write(&other, SMALL.replace("\"tirg\"", "\"concat\"")).unwrap();
    let out = tirg(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--data",
        s(&data),
        "--config",
        s(&other),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("parameter"), "{}", stderr(&out));
}

fn identity(out: &Output) -> f64 {
    let text = stdout(out);
    let line = text.lines().find(|l| l.starts_with("identity contribution")).unwrap();
    line.split_whitespace().nth(2).unwrap().parse().unwrap()
}

#[test]
fn diagnose_fresh_and_surgically_zeroed_tirg() {
    let (dir, cfg, data) = workspace();
    let run = dir.path().join("run");
    assert_eq!(code(&tirg(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--iterations", "0"])), 0);
    let ckpt = run.join("checkpoint.bin");
    let out = tirg(&["diagnose", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(identity(&out) > 0.9);
    assert!(stdout(&out).contains("trajectory"));

    let snap = RunConfig::load(&run.join("config.toml")).unwrap();
    let mut model = Model::load(snap.model, &ckpt).unwrap();
    let id = model.store.find("compose.w_r").unwrap();
    model.store.get_mut(id).value.data_mut().fill(0.0);
    model.save(&ckpt).unwrap();
    let out = tirg(&["diagnose", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(identity(&out), 1.0);
}

#[test]
fn diagnose_refuses_non_tirg_models() {
    let (dir, cfg, data) = workspace();
    let run = dir.path().join("run");
    let out = tirg(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--iterations", "0", "--strategy", "film",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = tirg(&["diagnose", "--checkpoint", s(&run.join("checkpoint.bin")), "--data", s(&data)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("only for TIRG"), "{}", stderr(&out));
}

#[test]
fn selfcheck_passes_with_timings() {
    let out = tirg(&["selfcheck", "--instances", "2"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
    assert!(text.contains(" s "));
}

#[test]
fn selfcheck_names_a_corrupted_op() {
    let out = tirg(&["selfcheck", "--instances", "2", "--corrupt", "tanh"]);
    assert_eq!(code(&out), 1);
    let text = stdout(&out);
    let failing = text.lines().find(|l| l.starts_with("FAIL")).unwrap();
    assert!(failing.contains("tanh"), "{text}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&tirg(&["train", "--bogus"])), 2);
}

#[test]
fn shipped_mini_css_config_matches_the_experiment() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mini_css.toml");
    let cfg = RunConfig::load(&path).unwrap();
    let mut expect = RunConfig::mini_css();
    expect.train.momentum = 0.9;
    expect.model.composition.layer_mode = tirg_core::LayerMode::Conv;
    assert_eq!(cfg, expect);
}
