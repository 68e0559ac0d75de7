//! End-to-end tests of the `krfd` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use krfd::eval::{fit_model, Config, FitSettings, ModelKind};
use krfd::io::{load_model, read_dense_dataset, read_matrix};

fn krfd_cmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_krfd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = krfd_cmd(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    krfd_cmd(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Columns of a CSV by header name; empty fields become NaN.
fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap_or(f64::NAN)).collect()
}

fn toy(dir: &Path, n: usize, l: usize, seed: u64) -> PathBuf {
    let d = dir.join("data");
    ok(&["datagen", "dense", "--n", &n.to_string(), "--l", &l.to_string(), "--seed", &seed.to_string(), "--out", s(&d)]);
    d
}

#[test]
fn datagen_dense_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["datagen", "dense", "--n", "1000", "--l", "51", "--seed", "7", "--out", s(&d)]);
    let (_, x) = read_matrix(&d.join("X.csv")).unwrap();
    let (_, t) = read_matrix(&d.join("t.csv")).unwrap();
    let (_, y) = read_matrix(&d.join("Y.csv")).unwrap();
    let (_, truth) = read_matrix(&d.join("truth_Y.csv")).unwrap();
    assert_eq!(x.shape(), (1000, 5));
    assert_eq!(t.shape(), (51, 1));
    assert_eq!(y.shape(), (1000, 51));
    assert_eq!(truth.shape(), (1000, 51));
    assert_eq!((t[(0, 0)], t[(50, 0)]), (0.0, 2.0));
    let manifest = json(&d.join("manifest.json"));
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn datagen_minimal_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["datagen", "dense", "--n", "2", "--l", "2", "--seed", "11", "--out", s(out)]);
    }
    for f in ["X.csv", "t.csv", "Y.csv", "truth_Y.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (_, y) = read_matrix(&a.join("Y.csv")).unwrap();
    assert_eq!(y.shape(), (2, 2));

    let (c, e) = (dir.path().join("c"), dir.path().join("e"));
    for out in [&c, &e] {
        ok(&["datagen", "sparse", "--n", "5", "--seed", "3", "--out", s(out)]);
    }
    for f in ["X.csv", "records.csv", "truth_curves.csv", "manifest.json"] {
        assert_eq!(std::fs::read(c.join(f)).unwrap(), std::fs::read(e.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fit_round_trip_matches_in_memory_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 30, 9, 1);
    let fit = dir.path().join("fit");
    ok(&["fit", "--model", "krfd", "--data", s(&data), "--out", s(&fit)]);

    let d = read_dense_dataset(&data.join("X.csv"), &data.join("t.csv"), &data.join("Y.csv")).unwrap();
    let memory = fit_model(ModelKind::Krfd, &Config::new(), &d.clone().into(), &FitSettings::default()).unwrap();
    let (loaded, grid) = load_model(&fit.join("model.json")).unwrap();
    assert!(grid.is_none());

    let pred = dir.path().join("pred");
    ok(&["predict", "--model", s(&fit.join("model.json")), "--x", s(&data.join("X.csv")), "--t", s(&data.join("t.csv")), "--out", s(&pred)]);
    let mean = column(&pred.join("predictions.csv"), "mean");
    let std = column(&pred.join("predictions.csv"), "std");
    assert_eq!(mean.len(), 30 * 9);
    for i in 0..30 {
        let xi: Vec<f64> = d.x.row(i).iter().copied().collect();
        let a = memory.predict_mean_curve(&xi, &d.t).unwrap();
        let b = loaded.predict_mean_curve(&xi, &d.t).unwrap();
        assert_eq!(a, b);
        for k in 0..9 {
            assert!((mean[i * 9 + k] - a[k]).abs() <= 1e-10 * (1.0 + a[k].abs()));
            assert!(std[i * 9 + k] > 0.0);
        }
    }
}

#[test]
fn predict_on_training_grid_reproduces_fit_report_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 25, 7, 2);
    for model in ["krfd", "flm"] {
        let fit = dir.path().join(format!("fit_{model}"));
        let pred = dir.path().join(format!("pred_{model}"));
        ok(&["fit", "--model", model, "--data", s(&data), "--out", s(&fit)]);
        ok(&["predict", "--model", s(&fit.join("model.json")), "--x", s(&data.join("X.csv")), "--t", s(&data.join("t.csv")), "--out", s(&pred)]);
        let (_, y) = read_matrix(&data.join("Y.csv")).unwrap();
        let mean = column(&pred.join("predictions.csv"), "mean");
        let sse: f64 = (0..25).flat_map(|i| (0..7).map(move |k| (i, k))).map(|(i, k)| (mean[i * 7 + k] - y[(i, k)]).powi(2)).sum();
        let report = json(&fit.join("fit_report.json"));
        let reported = report["training_sse"].as_f64().unwrap();
        assert!((sse - reported).abs() <= 1e-9 * reported, "{model}: {sse} vs {reported}");
        assert_eq!(report["n_observations"], 25 * 7);
    }
}

#[test]
fn evaluate_predictions_equal_to_observations() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 6, 5, 4);
    let (_, y) = read_matrix(&data.join("Y.csv")).unwrap();
    let mut text = String::from("input_id,t_0,mean\n");
    let (_, t) = read_matrix(&data.join("t.csv")).unwrap();
    for i in 0..6 {
        for k in 0..5 {
            text.push_str(&format!("{i},{},{}\n", t[(k, 0)], y[(i, k)]));
        }
    }
    let p = dir.path().join("pred.csv");
    std::fs::write(&p, text).unwrap();
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--predictions", s(&p), "--data", s(&data), "--out", s(&ev)]);
    let m = json(&ev.join("metrics.json"));
    assert_eq!(m["r2"].as_f64().unwrap(), 1.0);
    assert_eq!(m["mae"].as_f64().unwrap(), 0.0);
    assert!((m["mean_r"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let counts = column(&ev.join("r_histogram.csv"), "count");
    assert_eq!(counts.iter().sum::<f64>(), 6.0);
}

#[test]
fn sample_emits_requested_number_of_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 20, 6, 5);
    let fit = dir.path().join("fit");
    ok(&["fit", "--model", "krfd", "--data", s(&data), "--out", s(&fit)]);
    let out = dir.path().join("sample");
    ok(&["sample", "--model", s(&fit.join("model.json")), "--x", s(&data.join("X.csv")), "--t", s(&data.join("t.csv")), "--n-samples", "300", "--out", s(&out)]);
    let mut r = csv::Reader::from_path(out.join("samples.csv")).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(header.iter().filter(|h| h.starts_with("s_")).count(), 300);
    assert_eq!(r.records().count(), 20 * 6);
}

#[test]
fn krr_on_sparse_records_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("sparse");
    ok(&["datagen", "sparse", "--n", "10", "--seed", "1", "--out", s(&d)]);
    let out = krfd_cmd(&["fit", "--model", "krr", "--data", s(&d), "--out", s(&dir.path().join("f"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(code(&["tune", "--model", "krr", "--trials", "1", "--data", s(&d), "--out", s(&dir.path().join("t"))]), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 8, 4, 6);
    let bad = dir.path().join("model.json");
    std::fs::write(&bad, r#"{"format_version": 999, "model": {}}"#).unwrap();
    let o = s(&dir.path().join("o")).to_string();
    assert_eq!(code(&["predict", "--model", s(&bad), "--x", s(&data.join("X.csv")), "--t", s(&data.join("t.csv")), "--out", &o]), 3);
    assert_eq!(code(&["fit", "--model", "nope", "--data", s(&data), "--out", &o]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["fit", "--model", "krfd", "--data", s(&data), "--set", "fit.no_such_key=1", "--out", &o]), 2);

    // Y rows inconsistent with X rows.
    let broken = dir.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    for f in ["X.csv", "t.csv"] {
        std::fs::copy(data.join(f), broken.join(f)).unwrap();
    }
    let y = std::fs::read_to_string(data.join("Y.csv")).unwrap();
    let truncated: Vec<&str> = y.lines().take(4).collect();
    std::fs::write(broken.join("Y.csv"), truncated.join("\n") + "\n").unwrap();
    assert_eq!(code(&["fit", "--model", "krfd", "--data", s(&broken), "--out", &o]), 3);
}

#[test]
fn single_trial_tune_echoes_sampled_config_and_fit_uses_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 30, 6, 8);
    let tune = dir.path().join("tune");
    ok(&["tune", "--model", "krfd", "--trials", "1", "--folds", "3", "--data", s(&data), "--seed", "4", "--out", s(&tune)]);
    let trials = std::fs::read_to_string(tune.join("trials.jsonl")).unwrap();
    let lines: Vec<&str> = trials.lines().collect();
    assert_eq!(lines.len(), 1);
    let sampled: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    let sampled = sampled["config"].as_object().unwrap().clone();

    let best: toml::Table = std::fs::read_to_string(tune.join("best.toml")).unwrap().parse().unwrap();
    assert_eq!(best["model"].as_str(), Some("krfd"));
    let hp = best["hyperparams"].as_table().unwrap();
    assert_eq!(hp.len(), sampled.len());
    for (k, v) in &sampled {
        match v {
            serde_json::Value::String(c) => assert_eq!(hp[k].as_str(), Some(c.as_str())),
            other => assert_eq!(hp[k].as_float(), other.as_f64(), "{k}"),
        }
    }

    let fit = dir.path().join("fit");
    ok(&["fit", "--params", s(&tune.join("best.toml")), "--data", s(&data), "--out", s(&fit)]);
    let report = json(&fit.join("fit_report.json"));
    assert_eq!(report["model"], "krfd");
    for (k, v) in &sampled {
        assert_eq!(&report["hyperparams"][k], v, "{k}");
    }
}

#[test]
fn missing_hyperparameters_fall_back_to_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 15, 5, 9);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "model = \"krfd\"\n[hyperparams]\nsigma_g = 2.5\n").unwrap();
    let fit = dir.path().join("fit");
    ok(&["--config", s(&cfg), "fit", "--data", s(&data), "--out", s(&fit)]);
    let hp = &json(&fit.join("fit_report.json"))["hyperparams"];
    assert_eq!(hp["sigma_g"].as_f64(), Some(2.5));
    assert_eq!(hp["lambda_g"].as_f64(), Some(1.725e-4));
    assert_eq!(hp["lambda_t"].as_f64(), Some(0.052));

    // An explicit override wins over the file.
    let fit2 = dir.path().join("fit2");
    ok(&["--config", s(&cfg), "--set", "hyperparams.lambda_t=0.5", "fit", "--data", s(&data), "--out", s(&fit2)]);
    let hp2 = &json(&fit2.join("fit_report.json"))["hyperparams"];
    assert_eq!(hp2["lambda_t"].as_f64(), Some(0.5));
    assert_eq!(hp2["sigma_g"].as_f64(), Some(2.5));
}

#[test]
fn krfd_toy_tune_with_thirty_trials_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path(), 100, 11, 12);
    let start = Instant::now();
    ok(&["tune", "--model", "krfd", "--trials", "30", "--data", s(&data), "--out", s(&dir.path().join("tune"))]);
    assert!(start.elapsed().as_secs() < 300);
    let summary = json(&dir.path().join("tune/tune_summary.json"));
    assert_eq!(summary["n_trials"], 30);
    assert!(summary["best_score"].as_f64().unwrap().is_finite());
}

#[test]
fn sparse_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("sparse");
    ok(&["datagen", "sparse", "--n", "30", "--seed", "2", "--out", s(&d)]);
    let fit = dir.path().join("fit");
    ok(&["fit", "--model", "krsfd", "--data", s(&d), "--set", "fit.n_centers=8", "--out", s(&fit)]);
    let report = json(&fit.join("fit_report.json"));
    assert!(report["sigma2_map"].as_f64().unwrap() > 0.0);
    assert!(report["cg"]["iterations"].as_u64().is_some());
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--model", s(&fit.join("model.json")), "--data", s(&d), "--out", s(&ev)]);
    assert!(json(&ev.join("metrics.json"))["r2"].as_f64().unwrap().is_finite());
}
