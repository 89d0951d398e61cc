use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn protsi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protsi"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn protsi")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = protsi(dir, args);
    assert!(
        out.status.success(),
        "protsi {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = "N = 2\nK = 3\nW = 2\nm = 8\ne = 8\nepisodes_per_epoch = 12\neval_episodes = 6\nepochs = 2\n";

/// A temp dir with a generated task already ingested into `data/` and a small
/// config in `small.cfg`.
fn workspace(per_class: usize) -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out-dir", "raw", "--per-class", &per_class.to_string()]);
    ok(d, &["ingest", "--dataset", "raw/dataset.tsv", "--questions", "raw/questions.json", "--out-dir", "data"]);
    fs::write(d.join("small.cfg"), SMALL).unwrap();
    tmp
}

fn log_lines(path: PathBuf) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn ingest_writes_three_artifacts() {
    let tmp = workspace(30);
    let m = json(tmp.path().join("data/manifest.json"));
    assert_eq!(m["command"], "ingest");
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 3);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
    let records = fs::read_to_string(tmp.path().join("data/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 60);
}

#[test]
fn ingest_missing_column_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.tsv"), "Id\tEssaySet\tScore1\tEssayText\n1\t1\t2\tsome text\n").unwrap();
    fs::write(
        d.join("q.json"),
        r#"{"1": {"rubric_min": 0, "rubric_max": 2, "model_answer_text": "a b"}}"#,
    )
    .unwrap();
    let out = protsi(d, &["ingest", "--dataset", "bad.tsv", "--questions", "q.json", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Score2"));
}

#[test]
fn ingest_without_full_mark_answer_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("a.tsv"),
        "Id\tEssaySet\tScore1\tScore2\tEssayText\n1\t1\t0\t0\tone\n2\t1\t1\t1\ttwo words\n",
    )
    .unwrap();
    fs::write(
        d.join("q.json"),
        r#"{"1": {"rubric_min": 0, "rubric_max": 2, "model_answer_text": "auto_full_mark"}}"#,
    )
    .unwrap();
    let out = protsi(d, &["ingest", "--dataset", "a.tsv", "--questions", "q.json", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("full-mark"));
}

#[test]
fn train_with_default_sizes_logs_every_step() {
    let tmp = workspace(30);
    let d = tmp.path();
    fs::write(d.join("defaults.cfg"), "episodes_per_epoch = 8\neval_episodes = 4\n").unwrap();
    ok(d, &["--config", "defaults.cfg", "--data-dir", "data", "--out-dir", "run", "train"]);
    assert_eq!(log_lines(d.join("run/train_log.jsonl")).len(), 5 * 8);
    let m = json(d.join("run/manifest.json"));
    for name in ["best.psck", "final.psck", "train_log.jsonl", "metrics.json"] {
        assert!(m["artifacts"].as_array().unwrap().iter().any(|a| a.as_str().unwrap().ends_with(name)));
    }
    assert_eq!(m["seeds"]["model"], 0);
}

#[test]
fn ablation_flags_reach_the_log() {
    let tmp = workspace(30);
    let d = tmp.path();
    ok(d, &["--config", "small.cfg", "--data-dir", "data", "--out-dir", "run", "--disable-l2", "--disable-l3", "train"]);
    for e in log_lines(d.join("run/train_log.jsonl")) {
        assert_eq!(e["weights"]["l1"], 1.0);
        assert_eq!(e["weights"]["l2"], 0.0);
        assert_eq!(e["weights"]["l3"], 0.0);
    }
}

#[test]
fn invalid_alpha_is_a_config_error() {
    let tmp = workspace(30);
    let d = tmp.path();
    fs::write(d.join("bad.cfg"), "alpha = 0\n").unwrap();
    let out = protsi(d, &["--config", "bad.cfg", "--data-dir", "data", "--out-dir", "run", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));

    fs::write(d.join("unknown.cfg"), "alpah = 0.5\n").unwrap();
    let out = protsi(d, &["--config", "unknown.cfg", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_is_deterministic_and_thread_independent() {
    let tmp = workspace(30);
    let d = tmp.path();
    ok(d, &["--config", "small.cfg", "--data-dir", "data", "--out-dir", "run", "train"]);
    let args = |out: &'static str, threads: &'static str| {
        vec![
            "--config", "small.cfg", "--data-dir", "data", "--threads", threads, "--out-dir", out, "eval",
            "--checkpoint", "run/best.psck", "--episodes", "run/episodes_test.jsonl",
        ]
    };
    ok(d, &args("e1", "1"));
    ok(d, &args("e2", "1"));
    ok(d, &args("e3", "3"));
    let a = fs::read(d.join("e1/metrics.json")).unwrap();
    assert_eq!(a, fs::read(d.join("e2/metrics.json")).unwrap());
    assert_eq!(a, fs::read(d.join("e3/metrics.json")).unwrap());
    assert_eq!(a, fs::read(d.join("run/metrics.json")).unwrap());

    let m = json(d.join("e1/metrics.json"));
    for key in ["accuracy", "qwk", "confusion_matrix", "truth_histogram", "predicted_histogram", "degenerate_flags"] {
        assert!(m.get(key).is_some(), "missing {key}");
    }
    let dist = json(d.join("e1/distribution.json"));
    assert_eq!(dist["classes"].as_array().unwrap().len(), 2);
}

#[test]
fn memorized_training_episodes_score_high() {
    let tmp = workspace(60);
    let d = tmp.path();
    fs::write(
        d.join("fit.cfg"),
        "N = 2\nK = 5\nW = 5\nm = 16\ne = 32\noptimizer = adam\nepisodes_per_epoch = 150\neval_episodes = 10\nepochs = 4\n",
    )
    .unwrap();
    ok(d, &["--config", "fit.cfg", "--data-dir", "data", "--out-dir", "run", "train"]);
    ok(d, &["--config", "fit.cfg", "--data-dir", "data", "--out-dir", "eps", "episodes"]);
    ok(d, &[
        "--config", "fit.cfg", "--data-dir", "data", "--out-dir", "ev", "eval", "--checkpoint", "run/final.psck",
        "--episodes", "eps/episodes_train.jsonl",
    ]);
    let acc = json(d.join("ev/metrics.json"))["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "training-episode accuracy {acc}");
}

#[test]
fn rerun_from_manifest_config_is_byte_identical() {
    let tmp = workspace(30);
    let d = tmp.path();
    let before = fs::read(d.join("data/records.jsonl")).unwrap();
    ok(d, &["--config", "small.cfg", "--data-dir", "data", "--out-dir", "a", "--seed", "5", "train"]);
    let cfg_text = json(d.join("a/manifest.json"))["config"].as_str().unwrap().to_string();
    fs::write(d.join("replay.cfg"), cfg_text).unwrap();
    ok(d, &["--config", "replay.cfg", "--data-dir", "data", "--out-dir", "b", "train"]);
    for f in ["train_log.jsonl", "metrics.json", "best.psck", "final.psck"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(d.join("data/records.jsonl")).unwrap(), before);
}

#[test]
fn predict_prints_a_rubric_score() {
    let tmp = workspace(30);
    let d = tmp.path();
    ok(d, &["--config", "small.cfg", "--data-dir", "data", "--out-dir", "run", "train"]);
    let line = ok(d, &[
        "--config", "small.cfg", "--data-dir", "data", "predict", "--checkpoint", "run/best.psck", "--episodes",
        "run/episodes_test.jsonl", "--text", "the lid absorbs heat",
    ]);
    let v: Value = serde_json::from_str(line.trim()).unwrap();
    assert!([0, 1].contains(&v["score"].as_i64().unwrap()));
    let p: f64 = v["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((p - 1.0).abs() < 1e-9);
}

#[test]
fn ablate_writes_four_arms() {
    let tmp = workspace(30);
    let d = tmp.path();
    ok(d, &["--config", "small.cfg", "--data-dir", "data", "--out-dir", "abl", "ablate"]);
    let arms = json(d.join("abl/ablation.json"));
    let names: Vec<&str> = arms.as_array().unwrap().iter().map(|a| a["arm"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no_l3", "no_l2", "l1_only"]);
    let full = fs::read(d.join("abl/full/train_log.jsonl")).unwrap();
    assert_ne!(full, fs::read(d.join("abl/no_l2/train_log.jsonl")).unwrap());
    assert_ne!(full, fs::read(d.join("abl/no_l3/train_log.jsonl")).unwrap());
}

#[test]
fn gradcheck_covers_every_group() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck"]);
    for g in ["encoder.l0", "encoder.l1", "encoder.l2", "s1", "s2"] {
        assert!(out.lines().any(|l| l.starts_with(g)), "{g} missing from\n{out}");
    }
    assert!(out.trim_end().ends_with("PASS"));
}

#[test]
fn gradcheck_catches_a_corrupted_backward_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let out = protsi(tmp.path(), &["gradcheck", "--fault-group", "encoder.l1", "--fault-factor", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("encoder.l1"));
}

#[test]
fn gradcheck_refuses_file_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let out = protsi(tmp.path(), &["--embedder", "file:x.pseb", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = workspace(30);
    let out = protsi(tmp.path(), &[
        "--data-dir", "data", "--out-dir", "ev", "eval", "--checkpoint", "nope.psck", "--episodes", "nope.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(5));
}
