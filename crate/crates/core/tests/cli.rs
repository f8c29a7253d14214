use std::path::Path;
use std::process::{Command, Output};

fn gimlet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gimlet"))
        .args(args)
        .env("GIMLET_THREADS", "0")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn stderr_code(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("JSON on stderr");
    v["error"]["code"].as_str().unwrap().to_string()
}

#[test]
fn parse_prints_graph() {
    let out = gimlet(&["parse", "CCO"]);
    assert_eq!(out.status.code(), Some(0));
    let g = stdout_json(&out);
    assert_eq!(g["nodes"].as_array().unwrap().len(), 3);
    assert_eq!(g["edges"].as_array().unwrap().len(), 2);
}

#[test]
fn domain_and_usage_errors_have_distinct_codes() {
    let out = gimlet(&["parse", "C1CC"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_code(&out), "molgraph.UnclosedRingBond");

    assert_eq!(gimlet(&["parse"]).status.code(), Some(2));
    assert_eq!(gimlet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gimlet(&["grad-check", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        gimlet(&["pretrain", "--data", "x", "--out", "y", "--precision", "f16"])
            .status
            .code(),
        Some(2)
    );

    let out = gimlet(&["eval-zero-shot", "--ckpt", "/nonexistent/m.gmlt"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_code(&out), "model.IoError");
}

#[test]
fn grad_check_reports_and_passes() {
    let out = gimlet(&["grad-check", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert!(r["max_rel_error"].as_f64().unwrap() <= 1e-5);
}

fn make_synth(dir: &Path, n: &str) {
    let out = gimlet(&[
        "make-synth",
        "--out",
        dir.to_str().unwrap(),
        "--n-molecules",
        n,
        "--seed",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_pretrain_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    make_synth(d, "40");
    let again = d.join("again");
    make_synth(&again, "40");
    assert_eq!(
        std::fs::read(d.join("pretrain.jsonl")).unwrap(),
        std::fs::read(again.join("pretrain.jsonl")).unwrap()
    );

    let config = d.join("train.toml");
    std::fs::write(
        &config,
        "epochs = 1\nbatch_size = 32\n[model]\nd_model = 16\nd_kv = 4\nd_ff = 32\n",
    )
    .unwrap();
    let ckpt = d.join("m.gmlt");
    let log = d.join("log.jsonl");
    let out = gimlet(&[
        "pretrain",
        "--data",
        d.join("pretrain.jsonl").to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "5",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["epoch_losses"].as_array().unwrap().len(), 1);
    let events: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.first().unwrap()["event"], "start");
    assert_eq!(events.last().unwrap()["event"], "done");

    let out = gimlet(&[
        "eval-zero-shot",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        d.join("eval.jsonl").to_str().unwrap(),
        "--task",
        "heavy_atom_count",
    ]);
    // A one-epoch model may not emit digits yet; either outcome is a valid report or domain error.
    match out.status.code() {
        Some(0) => assert_eq!(stdout_json(&out)["reports"][0]["metric"], "rmse"),
        Some(1) => assert_eq!(stderr_code(&out), "eval.NoExtractions"),
        other => panic!("unexpected exit {other:?}"),
    }

    let attn = d.join("attn");
    let out = gimlet(&[
        "export-attn",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--smiles",
        "c1ccccc1O",
        "--instruction",
        "Is there a ring?",
        "--out",
        attn.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(attn.join("labels.json").exists());
    assert!(attn.join("layer1_head3.csv").exists());

    let out = gimlet(&[
        "eval-zero-shot",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--task",
        "no_such_task",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_code(&out), "cli.UnknownTask");
}

#[test]
fn tampered_labels_are_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    make_synth(dir.path(), "20");
    let path = dir.path().join("pretrain.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let line = text.lines().nth(1).unwrap();
    let flipped = if line.contains("\"Yes\"") {
        line.replace("\"Yes\"", "\"No\"")
    } else {
        line.replace("\"No\"", "\"Yes\"")
    };
    std::fs::write(&path, text.replacen(line, &flipped, 1)).unwrap();
    let out = gimlet(&["pretrain", "--data", path.to_str().unwrap(), "--out", "/tmp/never.gmlt"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_code(&out), "tasks.LabelMismatch");
}

#[test]
fn malformed_dataset_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"task_id\":\"t\",\"kind\":\"classification\",\"instruction\":\"x\"}\n{\"task_id\":\"t\",\"smiles\":\"CC\"}\n",
    )
    .unwrap();
    let out = gimlet(&["pretrain", "--data", path.to_str().unwrap(), "--out", "/tmp/never.gmlt"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_code(&out), "tasks.ParseError");
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
