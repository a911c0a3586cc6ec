use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use genprobe::spectra::{Matrix, WeightTensor};
use genprobe::store::{read_manifest, write_container, StoredTensor};

fn genprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genprobe"))
        .args(args)
        .env("GENPROBE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn identity_container(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("id.gprb");
    let tensors: Vec<StoredTensor> = vec![
        WeightTensor::from_matrix("fc.weight", Matrix::<f64>::identity(4)).unwrap().into(),
        WeightTensor::new("fc.bias", vec![4], vec![0.0f32; 4]).unwrap().into(),
    ];
    write_container(&p, &tensors).unwrap();
    p
}

#[test]
fn probe_identity_json() {
    let dir = tempfile::tempdir().unwrap();
    let c = identity_container(dir.path());
    let out = genprobe(&["probe", "--weights", path(&c), "--json"]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let e = doc["model"]["E_L2"].as_f64().unwrap();
    assert!((e - 4f64.ln().ln()).abs() < 1e-12);
    assert_eq!(doc["layers"].as_array().unwrap().len(), 1);
    assert_eq!(doc["depth"], 1);
    // deterministic output
    assert_eq!(out.stdout, genprobe(&["probe", "--weights", path(&c)]).stdout);
}

#[test]
fn probe_metric_selection_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let c = identity_container(dir.path());
    let out = genprobe(&["probe", "--weights", path(&c), "--metrics", "S_p"]);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["model"].as_object().unwrap().len(), 1);
    assert_eq!(doc["model"]["S_p"].as_f64(), Some(0.0));

    let file = dir.path().join("probe.csv");
    let out = genprobe(&["probe", "--weights", path(&c), "--csv", "--metrics", "F_p,E_L2", "--output", path(&file)]);
    assert!(out.status.success());
    let text = fs::read_to_string(file).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scope,name,metric,value");
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert!(lines[5].starts_with("model,,F_p,"));

    // a flat identity spectrum leaves nothing after shrinkage
    assert_eq!(genprobe(&["probe", "--weights", path(&c), "--lrf"]).status.code(), Some(1));
    let low_rank = dir.path().join("lr.gprb");
    let m = Matrix::<f64>::from_fn(16, 32, |i, j| {
        let noise = ((i * 37 + j * 11) % 17) as f64 / 17.0 - 0.5;
        20.0 * ((i + 1) as f64).sin() * ((j + 1) as f64).cos() + 0.01 * noise
    });
    let t: StoredTensor = WeightTensor::from_matrix("w", m).unwrap().into();
    write_container(&low_rank, &[t]).unwrap();
    let lrf = genprobe(&["probe", "--weights", path(&low_rank), "--lrf"]);
    assert!(lrf.status.success(), "{}", String::from_utf8_lossy(&lrf.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&lrf.stdout).unwrap();
    assert!(doc["model"]["lrf.E_L2"].is_number());
    assert_eq!(doc["lrf_applied"], true);
}

#[test]
fn probe_error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.gprb");
    fs::write(&bad, b"XXXX\x01\0\0\0\0\0\0\0\0\0\0\0{}").unwrap();
    let out = genprobe(&["probe", "--weights", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BadMagic"));

    let missing = genprobe(&["probe", "--weights", path(&dir.path().join("nope.gprb"))]);
    assert_eq!(missing.status.code(), Some(2));

    let vectors = dir.path().join("vec.gprb");
    let t: StoredTensor = WeightTensor::new("bn.weight", vec![8], vec![1.0f64; 8]).unwrap().into();
    write_container(&vectors, &[t]).unwrap();
    assert_eq!(genprobe(&["probe", "--weights", path(&vectors)]).status.code(), Some(3));
}

#[test]
fn synth_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let fam = dir.path().join("fam");
    let out = genprobe(&["synth", "--n-models", "3", "--link", "linear", "--seed", "1", "--out", path(&fam)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fam.join("manifest.jsonl");
    assert_eq!(read_manifest(&manifest).unwrap().len(), 3);
    for i in 0..3 {
        assert!(fam.join(format!("synth-{i:03}.gprb")).exists());
    }
    let report = dir.path().join("report");
    let args = [
        "evaluate",
        "--manifest",
        path(&manifest),
        "--metrics",
        "E_L2",
        "--targets",
        "test_accuracy",
        "--out",
        path(&report),
    ];
    assert!(genprobe(&args).status.success());
    let csv = fs::read_to_string(report.join("correlations.csv")).unwrap();
    assert_eq!(csv, "metric_id,target,rho,n\nE_L2,test_accuracy,1.0,3\n");
    assert!(genprobe(&args).status.success());
    assert_eq!(fs::read_to_string(report.join("correlations.csv")).unwrap(), csv);

    let bad_metric = genprobe(&["evaluate", "--manifest", path(&manifest), "--metrics", "X", "--out", path(&report)]);
    assert_eq!(bad_metric.status.code(), Some(1));
}

#[test]
fn evaluate_fails_when_too_many_records_fail() {
    let dir = tempfile::tempdir().unwrap();
    let fam = dir.path().join("fam");
    assert!(genprobe(&["synth", "--n-models", "5", "--seed", "2", "--out", path(&fam)]).status.success());
    fs::remove_file(fam.join("synth-001.gprb")).unwrap();
    let out = genprobe(&["evaluate", "--manifest", path(&fam.join("manifest.jsonl")), "--out", path(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_toy_with_zero_learning_rate() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = genprobe(&[
        "train-toy", "--data-seed", "1", "--init-seed", "2", "--lr", "0", "--epochs", "2", "--n-train", "128",
        "--n-test", "128", "--out", path(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_manifest(run.join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].test_accuracy, records[1].test_accuracy);
    assert_eq!(records[0].train_accuracy, records[1].train_accuracy);
}

#[test]
fn seeds_are_mandatory() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(genprobe(&["synth", "--n-models", "3", "--out", path(dir.path())]).status.code(), Some(2));
    assert_eq!(genprobe(&["train-toy", "--data-seed", "1", "--out", path(dir.path())]).status.code(), Some(2));
    assert_eq!(genprobe(&["grid", "--data-seed", "1", "--out", path(dir.path())]).status.code(), Some(2));
}

#[test]
fn small_grid_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = genprobe(&[
        "grid", "--data-seed", "0", "--seeds", "1", "--lrs", "0.01", "--wds", "0", "--widths", "8,12", "--epochs",
        "3", "--n-train", "64", "--n-test", "64", "--out", path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_manifest(dir.path().join("manifest.jsonl")).unwrap().len(), 6);
}
