//! End-to-end runs of the binary on a small synthetic dataset.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reformqa::io;
use serde_json::Value;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = common::synthetic(n, 21);
        let (train, test) = data.records.split_at(n * 3 / 4);
        let p = |f: &str| dir.path().join(f);
        io::save_dataset(&p("data.jsonl"), &data.records).unwrap();
        io::save_dataset(&p("train.jsonl"), train).unwrap();
        io::save_dataset(&p("test.jsonl"), test).unwrap();
        io::save_snippet_cache(&p("snippets.jsonl"), &data.cache).unwrap();
        io::write_jsonl(&p("corpus.jsonl"), &data.corpus).unwrap();
        io::save_taxonomy(&p("tax.tsv"), Some(&p("coords.jsonl")), &data.taxonomy).unwrap();
        std::fs::write(
            p("small.toml"),
            "seed = 3\ndim = 8\nlayers = 1\nhidden = 8\nproj-out = 4\nfusion-hidden = 8\nepochs = 2\nk = 16\n",
        )
        .unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_reformqa"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.path(name)).unwrap()).unwrap()
    }
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn predicted_pipeline_produces_scored_report() {
    let w = Workspace::new(16);
    let cfg = w.path("small.toml");
    let base = ["--config", cfg.as_str()];
    let with = |cmd: &str, extra: &[&str]| -> Vec<String> {
        std::iter::once(cmd).chain(base).chain(extra.iter().copied()).map(String::from).collect()
    };
    let run = |args: Vec<String>| {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        w.ok(&a)
    };
    let (data, tax, coords) = (w.path("data.jsonl"), w.path("tax.tsv"), w.path("coords.jsonl"));
    run(with("train-select", &["--dataset", &data, "--out", &w.path("sel.json")]));
    run(with(
        "train-substitute",
        &["--dataset", &data, "--taxonomy", &tax, "--coords", &coords, "--out", &w.path("sub.json")],
    ));
    run(with(
        "reformulate",
        &[
            "--dataset", &data, "--select-model", &w.path("sel.json"), "--substitute-model", &w.path("sub.json"),
            "--taxonomy", &tax, "--coords", &coords, "--out", &w.path("reform.jsonl"),
        ],
    ));
    let reform = lines(&PathBuf::from(w.path("reform.jsonl")));
    assert_eq!(reform.len(), 16);
    assert!(reform.iter().all(|r| r["query"].is_string()));

    run(with(
        "train-reader",
        &["--dataset", &data, "--snippets", &w.path("snippets.jsonl"), "--out", &w.path("reader.json")],
    ));
    run(with(
        "answer",
        &[
            "--dataset", &data, "--snippets", &w.path("snippets.jsonl"), "--corpus", &w.path("corpus.jsonl"),
            "--reader-model", &w.path("reader.json"), "--select-model", &w.path("sel.json"),
            "--substitute-model", &w.path("sub.json"), "--taxonomy", &tax, "--coords", &coords,
            "--reformulation", "predicted", "--aggregation", "mult", "--out", &w.path("answers.jsonl"),
        ],
    ));
    let out = run(with(
        "evaluate",
        &[
            "--dataset", &data, "--predictions", &w.path("answers.jsonl"), "--train", &w.path("train.jsonl"),
            "--out", &w.path("report.json"),
        ],
    ));
    let report = w.json("report.json");
    assert_eq!(report["instances"], 16);
    assert_eq!(report["metric"], "exact");
    for key in ["select_exact", "substitute", "search"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(report["overlap_percent"].is_number());
    assert!(String::from_utf8_lossy(&out.stderr).contains("search"));
}

#[test]
fn classification_mode_runs_end_to_end() {
    let w = Workspace::new(12);
    let cfg = w.path("small.toml");
    let data = w.path("data.jsonl");
    let snippets = w.path("snippets.jsonl");
    w.ok(&["train-reader", "--config", &cfg, "--dataset", &data, "--snippets", &snippets, "--out", &w.path("reader.json")]);
    w.ok(&[
        "train-classifier", "--config", &cfg, "--dataset", &data, "--snippets", &snippets, "--reader-model",
        &w.path("reader.json"), "--aggregation", "mult", "--out", &w.path("clf.json"),
    ]);
    w.ok(&[
        "answer", "--config", &cfg, "--dataset", &data, "--snippets", &snippets, "--reader-model", &w.path("reader.json"),
        "--classifier-model", &w.path("clf.json"), "--mode", "classification", "--aggregation", "mult",
        "--out", &w.path("answers.jsonl"),
    ]);
    let answers = lines(&PathBuf::from(w.path("answers.jsonl")));
    assert_eq!(answers.len(), 12);
    // every classifier answer comes from the training answer vocabulary
    let gold: Vec<String> = io::load_dataset(Path::new(&data))
        .unwrap()
        .iter()
        .map(|r| r.answers[0].answer.clone())
        .collect();
    for a in &answers {
        let ans = a["answer"].as_str().unwrap();
        assert!(gold.iter().any(|g| g == ans), "{ans} not in vocabulary");
    }
}

#[test]
fn analysis_commands_print_json() {
    let w = Workspace::new(16);
    let (train, test) = (w.path("train.jsonl"), w.path("test.jsonl"));
    let out = w.ok(&["audit-overlap", "--train", &train, "--test", &test]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["test_instances"], 4);
    let out = w.ok(&["baseline-freq", "--train", &train, "--test", &test]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["score"].is_number());
    let out = w.ok(&["stats", "--dataset", &w.path("data.jsonl")]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.is_object());
    let out = w.ok(&["search", "--corpus", &w.path("corpus.jsonl"), "--question", "what is the tiger best known for?"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["source"], "index");
}

#[test]
fn build_dataset_writes_valid_records() {
    let w = Workspace::new(4);
    std::fs::write(
        w.path("pairs.jsonl"),
        concat!(
            "{\"question\":\"Where does a peacock live?\",\"answer\":\"india\",\"entity\":\"peacock\"}\n",
            "{\"question\":\"What do zebras eat?\",\"answer\":\"grass\",\"entity\":\"zebra\"}\n",
        ),
    )
    .unwrap();
    std::fs::write(
        w.path("images.jsonl"),
        "{\"entity\":\"peacock\",\"image_id\":\"p1\"}\n{\"entity\":\"zebra\",\"image_id\":\"z1\"}\n",
    )
    .unwrap();
    w.ok(&[
        "build-dataset", "--pairs", &w.path("pairs.jsonl"), "--taxonomy", &w.path("tax.tsv"), "--images",
        &w.path("images.jsonl"), "--out", &w.path("built.jsonl"),
    ]);
    let built = io::load_dataset(Path::new(&w.path("built.jsonl"))).unwrap();
    let questions: Vec<&str> = built.iter().map(|r| r.question.as_str()).collect();
    assert_eq!(questions, ["Where does this bird live?", "What do this animal eat?"]);
}

#[test]
fn exit_codes_follow_error_class() {
    let w = Workspace::new(4);
    assert_eq!(w.run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(w.run(&["train-select"]).status.code(), Some(3));
    // referenced paths must exist before the command starts
    assert_eq!(w.run(&["stats", "--dataset", &w.path("missing.jsonl")]).status.code(), Some(3));
    std::fs::write(w.path("broken.jsonl"), "{\"id\": \"x\"}\n").unwrap();
    assert_eq!(w.run(&["stats", "--dataset", &w.path("broken.jsonl")]).status.code(), Some(4));
    std::fs::write(w.path("bad.toml"), "dimm = 3\n").unwrap();
    let out = w.run(&["stats", "--config", &w.path("bad.toml"), "--dataset", &w.path("data.jsonl")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimm"));
    let out = w.run(&["search", "--snippets", &w.path("snippets.jsonl"), "--question", "unseen question"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unseen question"));
}
