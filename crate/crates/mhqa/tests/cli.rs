//! Drives the compiled binary end to end: exit codes, config-file
//! precedence, and a gen-data / stats / build-graph / train / eval
//! roundtrip through a temporary directory.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mhqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhqa"))
        .args(args)
        .output()
        .expect("spawn mhqa")
}

fn ok_stdout(args: &[&str]) -> String {
    let out = mhqa(args);
    assert!(
        out.status.success(),
        "mhqa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn gen(dir: &Path, name: &str, n: &str, seed: &str) -> String {
    let path = dir.join(name);
    let stdout = ok_stdout(&[
        "gen-data",
        "--n",
        n,
        "--seed",
        seed,
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(
        stdout.contains(&format!("wrote {n} instances to")),
        "{stdout}"
    );
    path.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let out = mhqa(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in [
        "gen-data",
        "build-graph",
        "stats",
        "train",
        "eval",
        "gradcheck",
        "ablate",
    ] {
        assert!(text.contains(name), "--help is missing {name}:\n{text}");
        let sub = mhqa(&[name, "--help"]);
        assert!(sub.status.success(), "{name} --help should exit 0");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = mhqa(&["stats", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2), "clap usage errors exit with 2");
}

#[test]
fn missing_dataset_is_reported_on_stderr() {
    let out = mhqa(&["stats", "--data", "/nonexistent/input.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
    assert!(stderr.contains("input.jsonl"), "stderr was: {stderr}");
}

#[test]
fn roundtrip_gen_stats_graphs_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.jsonl", "24", "7");
    let dev = gen(dir.path(), "dev.jsonl", "12", "8");

    let stats = ok_stdout(&["stats", "--data", &train]);
    assert!(stats.contains("instances 24"), "{stats}");
    assert!(stats.contains("directed edges: same "), "{stats}");
    assert!(
        stats.contains("question-to-answer distances over edges \"all\":"),
        "{stats}"
    );
    assert!(stats.contains("  unreachable  "), "{stats}");

    let graphs = dir.path().join("graphs.jsonl");
    let built = ok_stdout(&[
        "build-graph",
        "--data",
        &train,
        "--out",
        graphs.to_str().unwrap(),
    ]);
    assert!(built.contains("built 24 graphs ("), "{built}");
    let rows = std::fs::read_to_string(&graphs).unwrap();
    let rows: Vec<Value> = rows
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 24);
    for (index, row) in rows.iter().enumerate() {
        assert_eq!(row["index"], index);
        assert!(row["nodes"].as_u64().unwrap() > 0);
        for key in row["counts"].as_object().unwrap().keys() {
            assert!(matches!(key.as_str(), "same" | "coref" | "window"), "{key}");
        }
        assert!(row["edges"].is_array());
    }

    let ckpt = dir.path().join("model.json");
    let trained = ok_stdout(&[
        "train",
        "--train",
        &train,
        "--dev",
        &dev,
        "--model",
        "mhqa-grn",
        "--steps",
        "1",
        "--hidden",
        "8",
        "--emb-dim",
        "6",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--seed",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(trained.contains("epoch  0  loss "), "{trained}");
    assert!(trained.contains("best epoch "), "{trained}");
    assert!(trained.contains("checkpoint written to "), "{trained}");

    let preds = dir.path().join("preds.jsonl");
    let evaled = ok_stdout(&[
        "eval",
        "--data",
        &dev,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    assert!(evaled.contains("accuracy "), "{evaled}");
    assert!(evaled.contains("/12)"), "{evaled}");
    assert!(evaled.contains("predictions written to "), "{evaled}");

    let rows = std::fs::read_to_string(&preds).unwrap();
    let rows: Vec<Value> = rows
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 12);
    for (index, row) in rows.iter().enumerate() {
        assert_eq!(row["index"], index);
        let probs: Vec<f64> = row["probabilities"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p.as_f64().unwrap())
            .collect();
        let total: f64 = probs.iter().sum();
        // All-zero rows mark instances where no candidate could be scored.
        assert!(total == 0.0 || (total - 1.0).abs() < 1e-9, "sum {total}");
        let prediction = row["prediction"].as_u64().unwrap() as usize;
        let answer = row["answer"].as_u64().unwrap() as usize;
        assert!(prediction < probs.len());
        assert!(answer < probs.len());
        assert_eq!(row["correct"].as_bool().unwrap(), prediction == answer);
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data.jsonl", "6", "5");
    let cfg = dir.path().join("mhqa.cfg");
    std::fs::write(&cfg, "# stats defaults\nedges=coref\ntau-window=0\n").unwrap();

    let from_file = ok_stdout(&["stats", "--data", &data, "--config", cfg.to_str().unwrap()]);
    assert!(from_file.contains("over edges \"coref\":"), "{from_file}");

    let overridden = ok_stdout(&[
        "stats",
        "--data",
        &data,
        "--config",
        cfg.to_str().unwrap(),
        "--edges",
        "all",
    ]);
    assert!(overridden.contains("over edges \"all\":"), "{overridden}");
}

#[test]
fn ablate_prints_one_row_per_edge_subset() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.jsonl", "12", "21");
    let dev = gen(dir.path(), "dev.jsonl", "6", "22");

    let table = ok_stdout(&[
        "ablate",
        "--train",
        &train,
        "--dev",
        &dev,
        "--model",
        "mhqa-grn",
        "--steps",
        "1",
        "--hidden",
        "6",
        "--emb-dim",
        "4",
        "--epochs",
        "1",
        "--batch-size",
        "12",
        "--seed",
        "2",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("edges"), "{table}");
    assert!(
        lines[0].contains("dev-acc") && lines[0].contains("best-epoch"),
        "{table}"
    );
    let labels = [
        "all",
        "wo-same",
        "wo-coref",
        "wo-window",
        "only-same",
        "only-coref",
        "only-window",
    ];
    assert_eq!(lines.len(), 1 + labels.len(), "{table}");
    for (line, label) in lines[1..].iter().zip(labels) {
        assert!(line.starts_with(label), "expected {label} row, got {line}");
    }
}

#[test]
fn gradcheck_smoke_passes() {
    let stdout = ok_stdout(&[
        "gradcheck",
        "--instances",
        "1",
        "--hidden",
        "3",
        "--emb-dim",
        "2",
        "--steps",
        "1",
        "--seed",
        "1",
    ]);
    assert!(stdout.contains("all gradient checks passed"), "{stdout}");
}
