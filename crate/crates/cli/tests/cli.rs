use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn spf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spf")
}

fn ok(args: &[&str]) {
    let out = spf(args);
    assert!(
        out.status.success(),
        "spf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset: 4x4 grid, one coarse window.
fn synth(dir: &Path) {
    ok(&["synth", "--grid", "4x4", "--years", "80", "--members", "1", "--eval-members", "2", "--out", s(dir)]);
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.toml");
    fs::write(
        &p,
        "seed = 3\n[model]\nwidth = 4\ndepth = 1\nembed_dim = 4\n[train]\nbatch_size = 2\nlog_every = 1\n[sample]\nsteps_total = 3\n[eval]\nensemble = 2\nsteps_total = 3\n",
    )
    .unwrap();
    p
}

#[test]
fn synth_writes_container_config_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    for f in ["manifest.json", "config.toml", "report.jsonl", "ssp-mid.m001.f32"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let r = records(&data.join("report.jsonl"));
    assert_eq!(r.len(), 4);
    let again = tmp.path().join("again");
    synth(&again);
    for f in ["manifest.json", "hist-low.m000.f32", "ssp-mid.m001.f32"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn zero_step_training_writes_untrained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    let cfg = small_config(tmp.path());
    ok(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&run), "--steps", "0"]);
    assert!(run.join("checkpoint.json").exists());
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap(), "");
}

#[test]
fn training_is_reproducible_from_persisted_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    ok(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&a), "--steps", "3"]);
    assert_eq!(records(&a.join("train_log.jsonl")).len(), 3);
    // Replay from the config persisted beside the first run; only the output
    // directory differs.
    let b = tmp.path().join("b");
    ok(&["--config", s(&a.join("config.toml")), "train", "--out", s(&b)]);
    for f in ["params.f32", "train_log.jsonl", "report.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn decadal_sampling_needs_fewer_evaluations_than_monthly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    let cfg = small_config(tmp.path());
    ok(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&run), "--steps", "2"]);
    let mut evals = Vec::new();
    for ts in ["decadal", "yearly", "monthly"] {
        let out = tmp.path().join(ts);
        ok(&[
            "--config", s(&cfg), "sample", "--run", s(&run), "--data", s(&data), "--timescale", ts, "--out", s(&out),
        ]);
        let r = records(&out.join("report.jsonl"));
        evals.push(r[0]["model_evals"].as_u64().unwrap());
        assert!(out.join("samples").join("manifest.json").exists());
        assert!(out.join("config.toml").exists());
    }
    assert!(evals[0] < evals[1] && evals[1] < evals[2], "{evals:?}");

    // A single funneled window at the finest timescale.
    let one = tmp.path().join("one");
    ok(&[
        "--config", s(&cfg), "sample", "--run", s(&run), "--data", s(&data), "--window", "0", "--period", "2,3",
        "--out", s(&one),
    ]);
    assert_eq!(records(&one.join("report.jsonl"))[0]["frames"], 12);
}

#[test]
fn eval_and_bench_write_tables_and_records() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    let cfg = small_config(tmp.path());
    ok(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&run), "--steps", "2"]);
    let ev = tmp.path().join("eval");
    ok(&["--config", s(&cfg), "eval", "--run", s(&run), "--data", s(&data), "--out", s(&ev)]);
    let table = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert!(table.starts_with("scenario,timescale,variable,crps"));
    assert_eq!(table.lines().count(), 3);

    let bench = tmp.path().join("bench");
    ok(&["--config", s(&cfg), "bench", "--data", s(&data), "--out", s(&bench)]);
    let r = records(&bench.join("report.jsonl"));
    assert_eq!(r.len(), 6);
    for rec in &r {
        assert_eq!(rec["model_evals"], rec["planned_evals"]);
    }
}

#[test]
fn validate_reports_every_jump() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("validate");
    let res = spf(&["validate", "--draws", "20000", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let r = records(&out.join("report.jsonl"));
    let jumps: Vec<_> = r.iter().filter(|v| v["check"] == "jump_continuity").collect();
    assert_eq!(jumps.len(), 3);
    for j in jumps {
        assert!(j["result"]["cov_max_abs"].is_number());
    }
}

#[test]
fn failures_are_categorised() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = spf(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(missing.status.code(), Some(3));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = \"x\"\n").unwrap();
    assert_eq!(spf(&["--config", s(&bad), "validate"]).status.code(), Some(2));
    let sched = tmp.path().join("sched.toml");
    fs::write(&sched, "[[stages]]\ntimescale_label = \"m\"\nr_h = 3\nframes = 4\n").unwrap();
    assert_eq!(spf(&["validate", "--schedule", s(&sched)]).status.code(), Some(2));
}
