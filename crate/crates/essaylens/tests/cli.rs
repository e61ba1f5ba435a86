use std::path::Path;
use std::process::{Command, Output};

use essaylens::cli::{EvaluateReport, SweepReport, TrainSummary};
use essaylens_core::evaluation::QwkTable;
use essaylens_core::scorers::ScorePrediction;
use serde_json::Value;

fn run(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_essaylens"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("ESSAYLENS_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

/// 40 set-3 essays whose score follows how often "evidence" appears. One
/// byte is cp1252 so the file is not valid UTF-8.
fn write_corpus(path: &Path) {
    let mut bytes = b"essay_id\tessay_set\tessay\trater1_domain1\tdomain1_score\n".to_vec();
    for i in 0..40 {
        let score = i % 4;
        let mut text = String::new();
        for s in 0..4 {
            let marker = if s < score { "evidence from the text" } else { "my own idea" };
            text.push_str(&format!("Sentence {} of essay {} uses {}. ", s, i, marker));
        }
        bytes.extend(format!("{}\t3\t", 100 + i).as_bytes());
        bytes.extend(text.trim_end().as_bytes());
        if i == 5 {
            bytes.extend(b" Caf\xe9.");
        }
        bytes.extend(format!("\t{}\t{}\n", score, score).as_bytes());
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn no_arguments_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &[], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage: essaylens"));
    let o = run(dir.path(), &["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage:"));
    let o = run(dir.path(), &["train", "--synthetic", "--kind", "transformer"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn hypergen_show_set_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["hypergen", "show", "--set", "3"], &[]);
    ok(&o);
    let text = stdout(&o);
    assert!(text.contains("\"P\": 0.8986"), "{}", text);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["batch_size"], 16);
    assert_eq!(v["n_heads"], 8);
    let o = run(dir.path(), &["hypergen", "show", "--set", "99"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_essay_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["score", "--model", "m", "--essay-file", "no/such/essay.txt"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/essay.txt"), "{}", stderr(&o));
}

#[test]
fn train_score_analyze_on_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &["train", "--synthetic", "--kind", "mha", "--epochs", "3"], &[("ESSAYLENS_MODEL_DIR", "store")]);
    ok(&o);
    let summary: TrainSummary = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary.set_id, 100);
    assert!(summary.report.epochs_run <= 3);
    assert!(d.join("store/mha-set100.eslm").exists());

    std::fs::write(d.join("essay.txt"), "Vivid1 plain3 vivid2. Plain4 plain5 vivid0 vivid1.").unwrap();
    std::fs::write(d.join("passage.txt"), "Plain3 vivid2 plain9. Vivid1 vivid4.").unwrap();
    let env = [("ESSAYLENS_MODEL_DIR", "store")];
    let args = ["score", "--model", "mha-set100", "--essay-file", "essay.txt"];
    let a = run(d, &args, &env);
    ok(&a);
    let p: ScorePrediction = serde_json::from_str(&stdout(&a)).unwrap();
    assert!((0..=3).contains(&p.score));
    // same answer when the container is named by path
    let b = run(d, &["score", "--model", "store/mha-set100.eslm", "--essay-file", "essay.txt"], &[]);
    assert_eq!(stdout(&a), stdout(&b));

    let o = run(
        d,
        &["analyze", "--passage-file", "passage.txt", "--essay-file", "essay.txt", "--model", "mha-set100"],
        &env,
    );
    ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["similarity"].as_array().unwrap().len(), 2);
    assert!(v["prediction"]["score"].is_i64());
    assert_eq!(v["provider"], summary.provider);

    let o = run(d, &["score", "--model", "absent", "--essay-file", "essay.txt"], &env);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_json_round_trips_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        "evaluate", "--synthetic", "--kind", "lstm", "--epochs", "2", "--format", "json", "--out", "report.json",
    ];
    let o = run(d, &args, &[]);
    ok(&o);
    let report: EvaluateReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report.table.len(), 1);
    assert_eq!(report.runs[0].report.folds.len(), 5);
    let row = &report.table[0];
    let again: QwkTable = serde_json::from_str(&serde_json::to_string(row).unwrap()).unwrap();
    assert_eq!(&again, row);
    let raw: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let direct: QwkTable = serde_json::from_value(raw["table"][0].clone()).unwrap();
    assert_eq!(&direct, row);
    let file: EvaluateReport = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(file, report);

    let o = run(d, &["evaluate", "--synthetic", "--kind", "lstm", "--epochs", "2"], &[]);
    ok(&o);
    let text = stdout(&o);
    assert!(text.lines().next().unwrap().contains("100"));
    assert!(text.contains("lstm"));
}

#[test]
fn tsv_corpus_embed_sweep_train() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_corpus(&d.join("corpus.tsv"));
    let provider = "hashed-bow:seed=3:dim=12";
    let o = run(d, &["embed", "corpus.tsv", "--provider", provider, "--out", "emb/essays.jsonl"], &[]);
    ok(&o);
    assert!(stderr(&o).contains("Windows-1252"), "{}", stderr(&o));
    let lines = std::fs::read_to_string(d.join("emb/essays.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 40);
    assert!(lines.contains("Caf\u{e9}"));

    let o = run(
        d,
        &[
            "reduce-sweep", "corpus.tsv", "--embeddings", "emb/essays.jsonl", "--kind", "lstm", "--d-model", "8",
            "--epochs", "2", "--fraction", "1.0,0.6", "--format", "json",
        ],
        &[],
    );
    ok(&o);
    let sweeps: Vec<SweepReport> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(sweeps.len(), 1);
    let fr: Vec<f64> = sweeps[0].rows.iter().map(|r| r.fraction).collect();
    assert_eq!(fr, [0.6, 1.0]);

    let o = run(
        d,
        &[
            "train", "corpus.tsv", "--set", "3", "--embeddings", "emb/essays.jsonl", "--kind", "mha", "--d-model", "8",
            "--epochs", "2", "--out", "m/x.eslm",
        ],
        &[],
    );
    ok(&o);
    let s: TrainSummary = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s.provider, provider);
    assert_eq!(s.n_train + s.n_dev + s.n_test, 40);

    // the saved model remembers its provider, so plain text can be scored
    std::fs::write(d.join("e.txt"), "Sentence one uses evidence from the text.").unwrap();
    ok(&run(d, &["score", "--model", "m/x.eslm", "--essay-file", "e.txt"], &[]));
}

#[test]
fn bad_embedding_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_corpus(&d.join("corpus.tsv"));
    ok(&run(d, &["embed", "corpus.tsv", "--provider", "hashed-bow:dim=4", "--out", "e.jsonl"], &[]));
    let text = std::fs::read_to_string(d.join("e.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = &lines[1][..lines[1].len() / 2];
    lines[1] = cut;
    std::fs::write(d.join("bad.jsonl"), lines.join("\n")).unwrap();
    let o = run(d, &["evaluate", "corpus.tsv", "--embeddings", "bad.jsonl", "--epochs", "1"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"model_dir": "from-file", "seed": 5}"#).unwrap();
    let o = run(d, &["--config", "cfg.json", "train", "--synthetic", "--kind", "lstm", "--epochs", "1"], &[]);
    ok(&o);
    assert!(d.join("from-file/lstm-set100.eslm").exists());
    let o = run(
        d,
        &["--config", "cfg.json", "train", "--synthetic", "--kind", "lstm", "--epochs", "1"],
        &[("ESSAYLENS_MODEL_DIR", "from-env")],
    );
    ok(&o);
    assert!(d.join("from-env/lstm-set100.eslm").exists());
    let o = run(d, &["--config", "missing.json", "hypergen", "show", "--set", "1"], &[]);
    assert_eq!(o.status.code(), Some(2));
}
