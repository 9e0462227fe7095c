use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use life_cli::exit;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn life(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_life"))
        .args(args)
        .env_remove("LIFE_JOBS")
        .env_remove("LIFE_HTTP_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Copy of the tiny config with `edit` applied, next to the fixture dataset.
fn edited_config(dir: &Path, edit: impl Fn(&str) -> String) -> PathBuf {
    let text = fs::read_to_string(fixture("tiny.toml")).unwrap();
    let text = text.replace("path = \"tiny.jsonl\"", &format!("path = {:?}", fixture("tiny.jsonl")));
    let path = dir.join("config.toml");
    fs::write(&path, edit(&text)).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_fixture() {
    let o = life(&["validate", "--config", s(&fixture("tiny.toml"))]);
    assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok"));
}

#[test]
fn negative_k_is_a_config_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |t| t.replace("k = 3", "k = -1"));
    let o = life(&["validate", "--config", s(&cfg)]);
    assert_eq!(code(&o), exit::CONFIG);
    assert!(stderr(&o).contains("fragments.k"), "{}", stderr(&o));
}

#[test]
fn unreachable_endpoint_fails_probe() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |t| {
        format!("{t}\n[scorer]\nbackend = \"http\"\nendpoint = \"http://127.0.0.1:{port}\"\ntimeout_secs = 1.0\n")
    });
    let o = life(&["validate", "--config", s(&cfg)]);
    assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
    let o = life(&["validate", "--probe", "--config", s(&cfg)]);
    assert_eq!(code(&o), exit::BACKEND);
    assert!(stderr(&o).contains("scorer.endpoint"), "{}", stderr(&o));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let o = life(&["ablate", "--variant", "no-xyz", "--config", s(&fixture("tiny.toml"))]);
    assert_eq!(code(&o), exit::USAGE);
    assert!(stderr(&o).contains("no-xyz"));
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    let o = life(&["train"]);
    assert_eq!(code(&o), exit::USAGE);
}

#[test]
fn empty_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    fs::write(&data, "").unwrap();
    let o = life(&[
        "divergence",
        "--config",
        s(&fixture("tiny.toml")),
        "--dataset",
        s(&data),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&o), exit::DATA);
    assert!(stderr(&o).contains("no articles"), "{}", stderr(&o));
}

#[test]
fn train_creates_missing_directories_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/run");
    let cfg = fixture("tiny.toml");
    let args = ["train", "--config", s(&cfg), "--out", s(&out)];
    let o = life(&args);
    assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
    let ckpt = out.join("checkpoints/model.json");
    let report = out.join("reports/train.json");
    let first = (fs::read(&ckpt).unwrap(), fs::read(&report).unwrap());
    let o = life(&args);
    assert_eq!(code(&o), exit::OK);
    assert_eq!(first, (fs::read(&ckpt).unwrap(), fs::read(&report).unwrap()));
    assert!(out.join(life_cli::METADATA_FILE).is_file());
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = life(&["train", "--config", s(&fixture("tiny.toml")), "--seed", seed, "--out", s(&out)]);
        assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
        fs::read(out.join("checkpoints/model.json")).unwrap()
    };
    assert_ne!(run("3", "a"), run("4", "b"));
}

#[test]
fn all_ablations_and_reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_life"))
        .args(["ablate", "--config", s(&fixture("tiny.toml")), "--out", s(&out)])
        .env("LIFE_JOBS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 600);
    for v in ["full", "no-mp", "no-kf", "no-cnn", "no-trm"] {
        let p = out.join(format!("reports/ablation_{v}.json"));
        let r: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        assert!(r["fingerprint"]["content_hash"].as_str().unwrap().len() == 64);
    }
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn remaining_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = fixture("tiny.toml");
    for cmd in [
        vec!["divergence"],
        vec!["sweep-k"],
        vec!["prompts", "--prompts", "T1,T2"],
        vec!["wordfreq", "--top-n", "5"],
        vec!["case"],
    ] {
        let mut args = cmd.clone();
        args.extend(["--config", s(&cfg), "--out", s(&out)]);
        let o = life(&args);
        assert_eq!(code(&o), exit::OK, "{cmd:?}: {}", stderr(&o));
    }
    for f in [
        "divergence.json",
        "histogram.csv",
        "boxplot.csv",
        "pairs.csv",
        "sweep_k.csv",
        "reports/sweep_k_0.json",
        "reports/sweep_k_3.json",
        "prompts.json",
        "reports/prompt_T1.json",
        "wordfreq_real.csv",
        "wordfreq_fake.csv",
        "case_full_real.csv",
        "case_full_fake.csv",
        "case_fragment_real.csv",
        "case_fragment_fake.csv",
        "case_weights.csv",
        "case_study.json",
        "config.resolved.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let words = fs::read_to_string(out.join("wordfreq_fake.csv")).unwrap();
    assert_eq!(words.lines().count(), 6);
    let top = words.lines().nth(1).unwrap().split(',').nth(1).unwrap().to_string();
    assert!(life_core::synth::FAKE_TOPIC_WORDS.contains(&top.as_str()), "{top}");
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b/b.jsonl");
    for p in [&a, &b] {
        let o = life(&["synth", "--output", s(p), "--n-fake", "10", "--n-real", "10"]);
        assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
    }
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}
