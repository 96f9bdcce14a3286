use std::collections::HashSet;
use std::fs;
use std::path::Path;

use gradleak::experiment::{parse_config, run_experiment, run_experiment_config, ExperimentError, Overrides};
use gradleak::parallel::ExecMode;

fn config(out: &Path, extra: &str) -> String {
    format!(
        r#"{{
        "name": "grid",
        "seed": 17,
        "model": {{"arch": {{"kind": "mlp", "hidden": [8]}}, "activation": "sigmoid",
                  "num_classes": 4, "input_shape": [1, 4, 4]}},
        "data": {{"kind": "builtin", "size": 4}},
        "attack": {{"max_iters": 40}},
        "output_dir": {out:?}
        {extra}
    }}"#
    )
}

const GRID: &str = r#", "repeat": 2, "grid": {"distance": ["sapag", "dlg"], "init": ["uniform", "xavier_normal"]}"#;

#[test]
fn two_by_two_grid_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&config(dir.path(), GRID)).unwrap();
    let outcome = run_experiment_config(&cfg, ExecMode::Sequential).unwrap();
    assert_eq!(outcome.exit_code(), 0);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 2);
    let cells: HashSet<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(cells.len(), 4);
    for r in &outcome.records {
        let run = dir.path().join(&r.cell.id).join(r.repeat.to_string());
        for f in ["result.json", "trace.csv", "metrics.json", "recon.pgm", "truth.pgm"] {
            assert!(run.join(f).is_file(), "{} missing {f}", r.run_id);
        }
        let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("result.json")).unwrap()).unwrap();
        assert_eq!(result["master_seed"], 17);
        assert_eq!(result["cell"]["id"], r.cell.id.as_str());
        assert_eq!(result["model"]["arch"]["hidden"][0], 8);
        assert_eq!(result["attack"]["max_iters"], 40);
    }
}

#[test]
fn summary_is_byte_identical_across_runs_and_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = parse_config(&config(a.path(), GRID)).unwrap();
    let cb = parse_config(&config(b.path(), GRID)).unwrap();
    run_experiment_config(&ca, ExecMode::Sequential).unwrap();
    run_experiment_config(&cb, ExecMode::Parallel { threads: 3 }).unwrap();
    for f in ["summary.csv", "metrics.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn distance_cells_attack_the_same_victim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&config(dir.path(), GRID)).unwrap();
    let outcome = run_experiment_config(&cfg, ExecMode::Sequential).unwrap();
    let truth = |r: &gradleak::experiment::RunRecord| {
        fs::read(dir.path().join(&r.cell.id).join(r.repeat.to_string()).join("truth.pgm")).unwrap()
    };
    let find = |kind: &str, init: &str, rep: usize| {
        outcome
            .records
            .iter()
            .find(|r| r.cell.id.contains(kind) && r.cell.id.contains(init) && r.repeat == rep)
            .unwrap()
    };
    assert_eq!(truth(find("sapag", "uniform", 1)), truth(find("dlg", "uniform", 1)));
}

#[test]
fn file_config_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    fs::write(&path, config(&dir.path().join("ignored"), "")).unwrap();
    let out = dir.path().join("chosen");
    let overrides = Overrides {
        seed: Some(3),
        output_dir: Some(out.clone()),
    };
    let outcome = run_experiment(&path, &overrides, ExecMode::Sequential).unwrap();
    assert_eq!(outcome.records.len(), 1);
    assert!(out.join("summary.csv").is_file());
    assert!(!dir.path().join("ignored").exists());
    let result = fs::read_to_string(out.join(&outcome.records[0].cell.id).join("0/result.json")).unwrap();
    assert!(result.contains("\"master_seed\": 3"));
}

#[test]
fn invalid_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = config(dir.path(), r#", "grid": {"batch_size": [0]}"#);
    let err = parse_config(&text).and_then(|c| run_experiment_config(&c, ExecMode::Sequential).map(|_| ()));
    match err {
        Err(ExperimentError::Config { path, .. }) => assert!(path.contains("batch_size"), "{path}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}
