use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lodesched::lode::{rank_runs, LodeModel};
use lodesched::testbed::{mean, ComparisonReport};
use lodesched::trajectory::{parse_corpus, to_json_line, ScheduleFamily, Trajectory, TrajectoryPoint};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lodesched"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A two-family, one-rate, one-seed corpus of `epochs` epochs.
fn small_corpus(dir: &TempDir, epochs: usize) -> PathBuf {
    let path = dir.path().join("corpus.jsonl");
    ok(&[
        "sweep",
        "--out",
        s(&path),
        "--epochs",
        &epochs.to_string(),
        "--seeds",
        "2",
        "--lrs",
        "1e-2,5e-2",
        "--families",
        "constant,cosine",
    ]);
    path
}

fn small_model(dir: &TempDir, corpus: &Path) -> PathBuf {
    let path = dir.path().join("model.json");
    ok(&[
        "train-lode",
        "--corpus",
        s(corpus),
        "--out",
        s(&path),
        "--steps",
        "30",
        "--latent-dim",
        "4",
        "--hidden-dim",
        "4",
        "--mlp-width",
        "6",
    ]);
    path
}

#[test]
fn default_sweep_writes_sixty_runs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("corpus.jsonl");
    ok(&["sweep", "--out", s(&out), "--epochs", "50", "--seeds", "3"]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 60);
    let corpus = parse_corpus(&out).unwrap();
    assert!(corpus.iter().all(|t| t.len() == 50));
    assert!(dir.path().join("corpus.jsonl.config.json").is_file());
}

#[test]
fn parallel_sweep_matches_serial() {
    let dir = TempDir::new().unwrap();
    let serial = small_corpus(&dir, 4);
    let parallel = dir.path().join("par.jsonl");
    ok(&[
        "sweep",
        "--out",
        s(&parallel),
        "--epochs",
        "4",
        "--seeds",
        "2",
        "--lrs",
        "1e-2,5e-2",
        "--families",
        "constant,cosine",
        "--jobs",
        "3",
    ]);
    assert_eq!(fs::read(serial).unwrap(), fs::read(parallel).unwrap());
}

#[test]
fn train_lode_is_deterministic_and_writes_holdout() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir, 6);
    let a = small_model(&dir, &corpus);
    let first = fs::read(&a).unwrap();
    small_model(&dir, &corpus);
    assert_eq!(first, fs::read(&a).unwrap());

    let held = dir.path().join("held.json");
    ok(&[
        "train-lode",
        "--corpus",
        s(&corpus),
        "--out",
        s(&held),
        "--steps",
        "5",
        "--latent-dim",
        "3",
        "--holdout",
        "2",
    ]);
    let list: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("held.json.holdout.json")).unwrap()).unwrap();
    assert_eq!(list["run_ids"].as_array().unwrap().len(), 2);
}

#[test]
fn rank_matches_library_ranking() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir, 6);
    let model = small_model(&dir, &corpus);
    let out = dir.path().join("rank.json");
    ok(&["rank", "--model", s(&model), "--corpus", s(&corpus), "--out", s(&out), "--prefix-epochs", "1"]);
    let entries: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let want = rank_runs(&LodeModel::load(&model).unwrap(), &parse_corpus(&corpus).unwrap(), 1).unwrap();
    let entries = entries.as_array().unwrap();
    assert_eq!(entries.len(), want.len());
    assert_eq!(entries[0]["run_id"], want[0].run_id.as_str());
    assert_eq!(entries[0]["predicted_final_metric"].as_f64().unwrap(), want[0].predicted_final_metric);
    assert_eq!(entries[0]["rank"], 1);
}

#[test]
fn reconstruct_reports_every_selected_run() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir, 6);
    let model = small_model(&dir, &corpus);
    let out = dir.path().join("recon.json");
    ok(&[
        "reconstruct",
        "--model",
        s(&model),
        "--corpus",
        s(&corpus),
        "--out",
        s(&out),
        "--runs",
        "constant-lr1e-2-s0,cosine-lr5e-2-s1",
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["predicted"].as_array().unwrap().len(), 6);

    let missing = run(&["reconstruct", "--model", s(&model), "--corpus", s(&corpus), "--out", s(&out), "--runs", "nope"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("--runs"));
}

#[test]
fn run_writes_trajectory_and_decisions() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir, 8);
    let model = small_model(&dir, &corpus);
    let out = dir.path().join("live.jsonl");
    ok(&[
        "run",
        "--model",
        s(&model),
        "--corpus",
        s(&corpus),
        "--out",
        s(&out),
        "--epochs",
        "8",
        "--mu",
        "2",
        "--n",
        "4",
    ]);
    let runs = parse_corpus(&out).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].schedule_family, ScheduleFamily::Lode);
    assert_eq!(runs[0].len(), 8);
    let decisions = fs::read_to_string(dir.path().join("live.jsonl.decisions.jsonl")).unwrap();
    assert_eq!(decisions.lines().count(), 4);

    let base = dir.path().join("base.jsonl");
    ok(&["run", "--family", "cosine", "--lr", "0.05", "--out", s(&base), "--epochs", "3"]);
    let runs = parse_corpus(&base).unwrap();
    assert_eq!(runs[0].schedule_family, ScheduleFamily::Cosine);
    assert_eq!(runs[0].points[0].lr, 0.05);
}

#[test]
fn sharpness_samples_on_schedule() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sharp.json");
    ok(&[
        "sharpness",
        "--family",
        "constant",
        "--lr",
        "0.01",
        "--epochs",
        "7",
        "--every",
        "3",
        "--iters",
        "20",
        "--out",
        s(&out),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let samples = report["samples"].as_array().unwrap();
    let epochs: Vec<u64> = samples.iter().map(|x| x["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, [2, 5, 6]);
    for x in samples {
        let (lr, lam) = (x["lr"].as_f64().unwrap(), x["lambda_max"].as_f64().unwrap());
        assert!(lam > 0.0);
        assert_eq!(x["eos_ratio"].as_f64().unwrap(), lr * lam / 2.0);
    }
}

fn write_runs(path: &Path, runs: &[Trajectory]) {
    fs::write(path, runs.iter().map(|t| to_json_line(t) + "\n").collect::<String>()).unwrap();
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn export_empty_and_tiny_corpora() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("empty.csv");
    ok(&["export", "--input", s(&empty), "--format", "csv", "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);

    let lr = 0.1 + 0.2;
    let tiny = Trajectory {
        run_id: "r".into(),
        seed: 3,
        schedule_family: ScheduleFamily::External,
        schedule_params: Default::default(),
        points: (0..2)
            .map(|t| TrajectoryPoint {
                t,
                train_loss: 1.0 / 3.0,
                val_metric: 0.5,
                lr,
            })
            .collect(),
    };
    let path = dir.path().join("tiny.jsonl");
    write_runs(&path, &[tiny]);
    ok(&["export", "--input", s(&path), "--out", s(&out)]);
    let (header, rows) = csv_rows(&out);
    assert_eq!(header, ["run_id", "seed", "schedule_family", "epoch", "train_loss", "val_metric", "lr"]);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][3], "1");
    assert_eq!(rows[0][4].parse::<f64>().unwrap(), 1.0 / 3.0);
    assert_eq!(rows[0][6].parse::<f64>().unwrap(), lr);
}

#[test]
fn compare_report_exports_consistent_means() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir, 8);
    let model = small_model(&dir, &corpus);
    let report_path = dir.path().join("report.json");
    ok(&[
        "compare",
        "--model",
        s(&model),
        "--corpus",
        s(&corpus),
        "--out",
        s(&report_path),
        "--epochs",
        "8",
        "--seeds",
        "2",
        "--sharpness-every",
        "4",
        "--sharpness-iters",
        "10",
        "--mu",
        "2",
        "--n",
        "4",
        "--jobs",
        "2",
    ]);
    let report = ComparisonReport::from_json(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let arms: Vec<&str> = report.arms.iter().map(|a| a.arm.as_str()).collect();
    assert_eq!(arms, ["constant", "cosine", "lode"]);

    let csv = dir.path().join("report.csv");
    ok(&["export", "--input", s(&report_path), "--out", s(&csv)]);
    let (header, rows) = csv_rows(&csv);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 8);
    for a in &report.arms {
        let best: Vec<f64> = rows
            .iter()
            .filter(|r| r[col("arm")] == a.arm && r[col("epoch")] == r[col("best_epoch")])
            .map(|r| r[col("test_metric")].parse().unwrap())
            .collect();
        assert_eq!(best.len(), 2);
        assert_eq!(mean(&best), a.mean_test_metric, "arm {}", a.arm);
    }

    let mixed = run(&["export", "--input", s(&report_path), s(&corpus), "--out", s(&csv)]);
    assert_eq!(mixed.status.code(), Some(1));
}

#[test]
fn replay_reproduces_outputs_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir, 5);
    let config = dir.path().join("corpus.jsonl.config.json");
    let recorded: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    assert_eq!(recorded["command"], "sweep");
    assert_eq!(recorded["args"]["epochs"], 5);

    let again = dir.path().join("again.jsonl");
    ok(&["--replay", s(&config), "--out", s(&again)]);
    assert_eq!(fs::read(&corpus).unwrap(), fs::read(&again).unwrap());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"command\":\"sweep\"}").unwrap();
    assert_eq!(run(&["--replay", s(&bad)]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let cases: [&[&str]; 6] = [
        &["sweep", "--out", "x.jsonl", "--bogus"],
        &["frobnicate"],
        &["sweep", "--out", "x.jsonl", "--epochs", "1"],
        &["sweep", "--out", "x.jsonl", "--epochs", "many"],
        &["run", "--out", "x.jsonl", "--family", "constant"],
        &["train-lode", "--corpus", "c", "--out", "m", "--pct-start", "1.5"],
    ];
    for args in cases {
        let out = run(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = stderr(&out);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
    let err = stderr(&run(&["sweep", "--out", "x.jsonl", "--epochs", "1"]));
    assert!(err.contains("--epochs") && err.contains(">= 2"), "{err}");
    let err = stderr(&run(&["run", "--out", "x.jsonl", "--family", "constant"]));
    assert!(err.contains("--lr"), "{err}");
}

#[test]
fn missing_inputs_are_runtime_errors_naming_the_flag() {
    let dir = TempDir::new().unwrap();
    let out = run(&["rank", "--model", "/nonexistent/m.json", "--corpus", "c", "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--model"));
    let out = run(&["export", "--input", "/nonexistent/c.jsonl", "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--input"));
}

#[test]
fn inputs_are_not_modified() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir, 6);
    let model = small_model(&dir, &corpus);
    let (c0, m0) = (fs::read(&corpus).unwrap(), fs::read(&model).unwrap());
    ok(&["rank", "--model", s(&model), "--corpus", s(&corpus), "--out", s(&dir.path().join("r.json"))]);
    ok(&["reconstruct", "--model", s(&model), "--corpus", s(&corpus), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(fs::read(&corpus).unwrap(), c0);
    assert_eq!(fs::read(&model).unwrap(), m0);
}
