//! End-to-end runs of the `mrmae` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrmae::core::dataset::Timestamp;
use mrmae::formats::{read_grid, read_json, ManifestFile};
use serde_json::{json, Value};
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn mrmae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrmae"))
        .current_dir(dir)
        .env("MRMAE_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = mrmae(dir, args);
    assert!(out.status.success(), "mrmae {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Synthetic data plus a small uniform-policy autoencoder, in a fresh directory.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(fixture("plant.json"), dir.path().join("plant.json")).unwrap();
    ok(dir.path(), &["--out", "synth", "synth", "--spec", "plant.json"]);
    write_json(
        &dir.path().join("train.json"),
        &json!({
            "data": "synth/manifest.json",
            "test_count": 12,
            "policy": {"kind": "uniform_fraction"},
            "fit": {"epochs": 40, "optimizer": {"learning_rate": 0.1}, "architecture": {"hidden": [32, 32]}}
        }),
    );
    ok(dir.path(), &["--out", "mae", "--seed", "5", "train", "--config", "train.json"]);
    dir
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_copy_plant_doubles_every_pixel() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(fixture("plant.json"), dir.path().join("plant.json")).unwrap();
    ok(dir.path(), &["--out", "s", "synth", "--spec", "plant.json"]);
    let manifest: ManifestFile = read_json(&dir.path().join("s/manifest.json")).unwrap();
    assert_eq!(manifest.layers.iter().map(|l| l.name.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    assert_eq!(manifest.timestamps.len(), 48);
    for &ts in &manifest.timestamps {
        let grid = |layer: &str| read_grid(&dir.path().join("s").join(manifest.grid_name(layer, Timestamp::new(ts.0, ts.1))), 4, 4).unwrap().unwrap();
        let (a, b) = (grid("a"), grid("b"));
        // Doubling is exact in binary floating point, even after f32 rounding.
        assert!(a.iter().zip(&b).all(|(a, b)| *b == 2.0 * a), "{ts:?}");
    }
    let truth: Value = read_json(&dir.path().join("s/ground_truth.json")).unwrap();
    assert!(truth["features"].as_array().unwrap().len() >= 8);
}

#[test]
fn train_then_predict_beats_the_mean_baseline() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--out", "p", "predict", "--model", "mae/model.ckpt", "--data", "synth/manifest.json", "--test-count", "12", "--split", "train", "--mask-layers", "b"]);
    let acc: Value = read_json(&d.join("p/accuracy.json")).unwrap();
    let (model, baseline) = (acc["accuracy"].as_f64().unwrap(), acc["mean_baseline_accuracy"].as_f64().unwrap());
    assert!(model > baseline + 10.0, "model {model} vs mean baseline {baseline}");
    let rows = read_csv(&d.join("p/predictions.csv"));
    assert_eq!(rows.len(), 36 * 4, "one line per masked feature of every training row");
    assert!(rows.iter().all(|r| r[1] == "b"));
    let log = read_csv(&d.join("mae/training_log.csv"));
    assert_eq!(log.len(), 40);
}

#[test]
fn ensemble_of_one_with_the_given_mask_equals_predict() {
    let dir = workspace();
    let d = dir.path();
    let common = ["--model", "mae/model.ckpt", "--data", "synth/manifest.json", "--mask-layers", "b"];
    ok(d, &[&["--out", "p", "predict"][..], &common].concat());
    // b is half of the features, so a 50% ensemble mask adds nothing to it.
    ok(d, &[&["--out", "e", "ensemble", "--iters", "1", "--ensemble-mask-frac", "0.5"][..], &common].concat());
    assert_eq!(fs::read(d.join("p/predictions.csv")).unwrap(), fs::read(d.join("e/predictions.csv")).unwrap());
    assert_eq!(fs::read(d.join("p/accuracy.json")).unwrap(), fs::read(d.join("e/accuracy.json")).unwrap());
}

#[test]
fn dumped_members_average_to_the_ensemble_prediction() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--out", "e", "--seed", "9", "ensemble", "--model", "mae/model.ckpt", "--data", "synth/manifest.json", "--mask-layers", "b", "--iters", "3", "--ensemble-mask-frac", "0.75", "--dump-members", "members.csv"]);
    let members = read_csv(&d.join("e/members.csv"));
    let preds = read_csv(&d.join("e/predictions.csv"));
    // Row 0, feature b(0,0) = index 4.
    let q: Vec<f64> = members.iter().filter(|r| r[0] == "0" && r[2] == "4").map(|r| r[4].parse().unwrap()).collect();
    assert_eq!(q.len(), 3);
    let mean = (q[0] + q[1] + q[2]) / 3.0;
    let got: f64 = preds[0][4].parse().unwrap();
    assert!((got - mean).abs() <= 1e-15, "{got} vs {mean}");
    assert!(mrmae(d, &["--out", "x", "ensemble", "--model", "mae/model.ckpt", "--data", "synth/manifest.json", "--dump-members", "../escape.csv"]).status.code() != Some(0));
}

fn evaluate_config(d: &Path) {
    write_json(
        &d.join("task.json"),
        &json!({
            "data": "synth/manifest.json", "test_count": 12, "model": "linear",
            "task": {"outputs": ["b"]}
        }),
    );
    ok(d, &["--out", "lin", "train", "--config", "task.json"]);
    write_json(
        &d.join("eval.json"),
        &json!({
            "data": "synth/manifest.json", "test_count": 12, "task": {"outputs": ["b"]},
            "models": [
                {"name": "mae", "path": "mae/model.ckpt"},
                {"name": "mae_ens", "path": "mae/model.ckpt", "ensemble": {"iterations": 4, "mask_frac": 0.75, "seed": 1}},
                {"name": "linear", "path": "lin/model.ckpt"}
            ],
            "sweep": {"fractions": [0.0, 0.25, 0.5, 0.75], "trials": 3},
            "trend": {"permutations": 99}
        }),
    );
}

#[test]
fn evaluate_sweep_has_a_row_per_fraction_and_model() {
    let dir = workspace();
    let d = dir.path();
    evaluate_config(d);
    ok(d, &["--out", "ev", "evaluate", "--config", "eval.json", "--sweep", "--trend"]);
    let sweep = read_csv(&d.join("ev/sweep.csv"));
    assert_eq!(sweep.len(), 4 * 3);
    assert_eq!(sweep.iter().take(3).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["mae", "mae_ens", "linear"]);
    assert!(sweep.iter().all(|r| r[4] == "3"));
    let acc = read_csv(&d.join("ev/accuracy.csv"));
    assert_eq!(acc.last().unwrap()[0], "mean_baseline");
    assert_eq!(read_csv(&d.join("ev/trend.csv")).len(), 3);
    // Without --sweep the configured sweep is skipped.
    ok(d, &["--out", "ev2", "evaluate", "--config", "eval.json"]);
    assert!(!d.join("ev2/sweep.csv").exists());
}

#[test]
fn pseudo_labels_fill_only_missing_values() {
    let dir = workspace();
    let d = dir.path();
    let mut spec: Value = read_json(&fixture("plant.json")).unwrap();
    spec["missing"] = json!([{"layer": "b", "from": 40, "to": 48}]);
    write_json(&d.join("gappy.json"), &spec);
    ok(d, &["--out", "gappy", "synth", "--spec", "gappy.json"]);
    write_json(&d.join("student.json"), &json!({"kind": "linear", "task": {"outputs": ["b"]}, "seed": 3}));
    ok(d, &["--out", "pl", "pseudo-label", "--teacher", "mae/model.ckpt", "--unlabeled", "gappy/manifest.json", "--iters", "4", "--ensemble-mask-frac", "0.6", "--student", "student.json"]);
    let summary: Value = read_json(&d.join("pl/provenance_summary.json")).unwrap();
    assert_eq!(summary["pseudo"], 8 * 4);
    assert_eq!(summary["observed"], 48 * 8 - 8 * 4);
    let prov = read_csv(&d.join("pl/provenance.csv"));
    let pseudo_rows: Vec<usize> = prov.iter().filter(|r| r[5] == "pseudo").map(|r| r[0].parse().unwrap()).collect();
    assert!(pseudo_rows.iter().all(|&r| r >= 40));
    assert!(prov.iter().filter(|r| r[5] == "pseudo").all(|r| r[2] == "b"));
    let data = read_csv(&d.join("pl/dataset.csv"));
    assert!(data.iter().all(|r| !r[4].is_empty()), "no value is left missing");
    assert!(d.join("pl/student.ckpt").exists());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = mrmae(d, &["--out", "x", "train", "--config", "missing.json"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    write_json(&d.join("bad.json"), &json!({"data": "m.json", "epochz": 3}));
    let out = mrmae(d, &["--out", "x", "train", "--config", "bad.json"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    assert_ne!(mrmae(d, &["--out", "x", "predict", "--bogus"]).status.code(), Some(0));
}

/// Runs `args` into `first`, replays its run.json into `second` with a
/// different worker count and compares every output byte for byte.
fn assert_replays(d: &Path, first: &str, args: &[&str]) {
    ok(d, &[&["--out", first, "--workers", "3"][..], args].concat());
    let second = format!("{first}_replay");
    let run = format!("{first}/run.json");
    ok(d, &["--out", &second, "--workers", "1", "replay", &run]);
    let (a, b) = (files(&d.join(first)), files(&d.join(&second)));
    assert_eq!(a.len(), b.len(), "{first}: file lists differ");
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        if na == "run.json" {
            continue; // records the worker count
        }
        assert!(ba == bb, "{first}/{na} differs on replay");
    }
}

#[test]
fn every_command_replays_byte_identically() {
    let dir = workspace();
    let d = dir.path();
    evaluate_config(d);
    write_json(
        &d.join("mlp.json"),
        &json!({"data": "synth/manifest.json", "test_count": 12, "model": "task_mlp", "task": {"outputs": ["b"]},
                "fit": {"epochs": 5}, "param_budget": 600}),
    );
    write_json(
        &d.join("lasso.json"),
        &json!({"data": "synth/manifest.json", "test_count": 12, "model": "lasso", "task": {"outputs": ["b"]}}),
    );
    write_json(&d.join("student.json"), &json!({"kind": "mae", "task": {"outputs": ["b"]}, "fit": {"epochs": 3}, "seed": 1}));
    assert_replays(d, "r_synth", &["synth", "--spec", "plant.json"]);
    assert_replays(d, "r_train", &["train", "--config", "train.json"]);
    assert_replays(d, "r_mlp", &["train", "--config", "mlp.json"]);
    assert_replays(d, "r_lasso", &["train", "--config", "lasso.json"]);
    let model = ["--model", "mae/model.ckpt", "--data", "synth/manifest.json", "--mask-frac", "0.3"];
    assert_replays(d, "r_predict", &[&["predict"][..], &model].concat());
    assert_replays(d, "r_ens", &[&["ensemble", "--iters", "5", "--dump-members", "m.csv"][..], &model].concat());
    assert_replays(d, "r_imp", &["importance", "--model", "mae/model.ckpt", "--data", "synth/manifest.json", "--iterations", "7", "--mode", "feature:5"]);
    assert_replays(d, "r_shift", &["shift", "--data", "synth/manifest.json"]);
    assert_replays(d, "r_select", &["select-patches", "--map", "r_shift/variability_a.f32", "--rows", "2", "--cols", "2"]);
    assert_replays(d, "r_pl", &["pseudo-label", "--teacher", "mae/model.ckpt", "--unlabeled", "synth/manifest.json", "--labeled", "synth/manifest.json", "--student", "student.json"]);
    assert_replays(d, "r_eval", &["evaluate", "--config", "eval.json", "--sweep", "--trend"]);
}
