use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mvelma::dataio::read_dataset;
use mvelma::pipeline::{evaluate, read_predictions, TrainedModel};
use sha2::{Digest, Sha256};

const MODEL_FLAGS: [&str; 8] = ["--hidden", "8", "--latent", "4", "--epochs", "5", "--trees", "20"];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvelma"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "synth",
        "--events",
        "60",
        "--counties",
        "4",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn digest_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, Sha256::digest(fs::read(p).unwrap()).to_vec())
        })
        .collect()
}

fn train(data: &Path, model: &Path) -> String {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
    ];
    args.extend(MODEL_FLAGS);
    ok(&args)
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "3");
    synth(&b, "3");
    synth(&c, "4");
    let da = digest_dir(&a);
    assert!(!da.is_empty());
    assert_eq!(da, digest_dir(&b));
    assert_ne!(da, digest_dir(&c));
}

#[test]
fn evaluate_scores_perfect_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "5");
    let (ds, _) = read_dataset(&data).unwrap();
    let mut text = String::from("event_id,y_true,y_pred,gp_mean,gp_var,confidence\n");
    for (e, y) in ds.events.iter().zip(&ds.targets) {
        text.push_str(&format!("{},{y:?},{y:?},,,\n", e.event_id));
    }
    let pred = tmp.path().join("pred.csv");
    fs::write(&pred, text).unwrap();
    let out = ok(&["evaluate", "--pred", pred.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(out.contains("MAE=0.000000 R2=1.000000"), "{out}");
}

#[test]
fn train_predict_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "6");
    let (m1, m2) = (tmp.path().join("m1.json"), tmp.path().join("m2.json"));
    let log = train(&data, &m1);
    assert!(log.contains("test MAE="), "{log}");
    train(&data, &m2);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    let pred = tmp.path().join("pred.csv");
    ok(&[
        "predict",
        "--model",
        m1.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--split",
        "test",
    ]);
    let rows = read_predictions(&pred).unwrap();
    assert_eq!(rows.len(), 12);
    let y_pred: Vec<f64> = rows.iter().map(|r| r.y_pred).collect();
    let y_true: Vec<f64> = rows.iter().map(|r| r.y_true).collect();
    let (ds, _) = read_dataset(&data).unwrap();
    let truth: Vec<f64> = rows
        .iter()
        .map(|r| {
            let i = ds.events.iter().position(|e| e.event_id == r.event_id).unwrap();
            ds.targets[i]
        })
        .collect();
    for (a, b) in y_true.iter().zip(&truth) {
        assert!((a - b).abs() <= 5e-7);
    }
    let expected = evaluate(&y_pred, &truth).unwrap();
    let out = ok(&["evaluate", "--pred", pred.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.lines().last(), Some(expected.to_string().as_str()));

    let model = TrainedModel::load(&m1).unwrap();
    let exact = model.predict(&ds).unwrap();
    let unrounded: Vec<f64> = rows
        .iter()
        .map(|r| exact.iter().find(|p| p.event_id == r.event_id).unwrap().y_pred)
        .collect();
    let reference = evaluate(&unrounded, &truth).unwrap();
    assert!((reference.mae - expected.mae).abs() < 1e-5);
    assert!((reference.r2 - expected.r2).abs() < 1e-5);

    let map = tmp.path().join("map.csv");
    ok(&[
        "map",
        "--pred",
        pred.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        map.to_str().unwrap(),
    ]);
    let table = fs::read_to_string(&map).unwrap();
    assert!(table.starts_with("county_id,opfvl,ppvl,apc\n"), "{table}");
}

#[test]
fn usage_errors_exit_64() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(64));
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent");
    let out = run(&["ablate", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradient_check_passes() {
    let out = ok(&["check-grads", "--seed", "3"]);
    assert!(out.contains("total cases=215"), "{out}");
}
