//! The command-line pipeline on a tiny scenario: dataset, training, resume,
//! evaluation, sweep and oracle outputs.

use std::path::Path;

use clap::Parser;
use rislab::channel::read_dataset;
use rislab::cli::{Cli, ResultRow};
use rislab::hgnn::read_checkpoint;

const TINY: &[&str] = &[
    "--set",
    "scenario.n_t=2",
    "--set",
    "scenario.m_x=2",
    "--set",
    "scenario.m_y=1",
    "--set",
    "train.hidden=8",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.pretrain_epochs=1",
    "--set",
    "eval_samples=4",
];

fn run(args: &[&str]) -> Result<(), rislab::cli::CliError> {
    let mut full = vec!["rislab"];
    full.extend_from_slice(args);
    Cli::try_parse_from(full).unwrap().execute()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.risd");
    run(&with_tiny(&["gen-data", "--seed", "5", "--out", s(&data), "--n-train", "24", "--n-val", "6"])).unwrap();
    let d = read_dataset(&data).unwrap();
    assert_eq!((d.n_train, d.samples.len(), d.scenario.n_t), (24, 30, 2));

    let straight = dir.path().join("straight.ckpt");
    let metrics = dir.path().join("m.jsonl");
    run(&with_tiny(&[
        "train", "--seed", "5", "--data", s(&data), "--out", s(&straight), "--metrics", s(&metrics), "--set", "train.epochs=2",
    ]))
    .unwrap();
    let lines = std::fs::read_to_string(&metrics).unwrap();
    let epochs: Vec<u64> = lines
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2]);

    let half = dir.path().join("half.ckpt");
    let resumed = dir.path().join("resumed.ckpt");
    run(&with_tiny(&["train", "--seed", "5", "--data", s(&data), "--out", s(&half), "--set", "train.epochs=1"])).unwrap();
    run(&with_tiny(&[
        "train", "--seed", "5", "--data", s(&data), "--out", s(&resumed), "--resume", s(&half), "--set", "train.epochs=2",
    ]))
    .unwrap();
    assert_eq!(std::fs::read(&straight).unwrap(), std::fs::read(&resumed).unwrap());
    let net = read_checkpoint(&resumed).unwrap();
    assert_eq!(net.epochs_done, 2);
    assert!(net.eta > 0.0);

    let csv_path = dir.path().join("r.csv");
    run(&with_tiny(&[
        "eval", "--seed", "5", "--data", s(&data), "--checkpoint", s(&resumed), "--out", s(&csv_path), "--methods", "gnn,ao_case2,random_phase",
    ]))
    .unwrap();
    let rows: Vec<ResultRow> = csv::Reader::from_path(&csv_path).unwrap().deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["gnn", "ao_case2", "random_phase"]);
    assert!(rows.iter().all(|r| r.n == 4 && r.mean_wsr > 0.0));
    assert!(rows[0].assoc_match.is_some() && rows[1].assoc_match.is_none());
}

#[test]
fn sweep_and_oracle_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    run(&with_tiny(&[
        "sweep",
        "--seed",
        "2",
        "--out-dir",
        s(&out),
        "--set",
        "n_val=4",
        "--set",
        "methods=[\"ao_case2\", \"brute_force\"]",
        "--set",
        "sweep.axis=\"p_max_dbm\"",
        "--set",
        "sweep.values=[0.0, 20.0]",
    ]))
    .unwrap();
    let rows: Vec<ResultRow> = csv::Reader::from_path(out.join("results.csv")).unwrap().deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let plot: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("plot.json")).unwrap()).unwrap();
    assert_eq!(plot["axis"], "p_max_dbm");
    let ao = plot["series"]["ao_case2"]["mean"].as_array().unwrap();
    assert!(ao[1].as_f64().unwrap() > ao[0].as_f64().unwrap());
    assert!(plot["failures"].as_array().unwrap().is_empty());

    let data = dir.path().join("d.risd");
    let table = dir.path().join("o.csv");
    run(&with_tiny(&["gen-data", "--seed", "2", "--out", s(&data), "--n-train", "0", "--n-val", "3"])).unwrap();
    run(&with_tiny(&["oracle", "--seed", "2", "--data", s(&data), "--out", s(&table)])).unwrap();
    let mut r = csv::Reader::from_path(&table).unwrap();
    let records: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    // R^K = 4 associations for each of 3 samples, exactly one best per sample
    assert_eq!(records.len(), 12);
    assert_eq!(records.iter().filter(|x| &x[3] == "true").count(), 3);
}

#[test]
fn invalid_sweep_points_are_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    run(&with_tiny(&[
        "sweep",
        "--seed",
        "2",
        "--out-dir",
        s(&out),
        "--set",
        "n_val=2",
        "--set",
        "methods=[\"ao_case2\"]",
        "--set",
        "sweep.axis=\"m\"",
        "--set",
        "sweep.values=[3.0, 4.0]",
    ]))
    .unwrap();
    let plot: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("plot.json")).unwrap()).unwrap();
    assert_eq!(plot["failures"].as_array().unwrap().len(), 1);
    assert!(plot["series"]["ao_case2"]["mean"][1].as_f64().unwrap() > 0.0);
}

#[test]
fn fatal_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.risd");
    assert!(run(&["gen-data", "--out", s(&data)]).is_err(), "missing seed");
    assert!(run(&["eval", "--seed", "1", "--data", s(&dir.path().join("absent")), "--out", "x.csv"]).is_err());
    assert!(run(&["gen-data", "--seed", "1", "--out", s(&data), "--set", "scenario.k=0"]).is_err());
}
