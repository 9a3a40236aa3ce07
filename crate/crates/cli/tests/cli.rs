use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use otbe::barycenter::multi_correlation;
use otbe::extractor::{fit_regression, FeatureModel, FitConfig, Roles};
use otbe::matstats::RidgePolicy;
use otbe::simlab::{sem_to_moments, SemSpec};
use serde_json::Value;

fn otbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otbe")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = otbe(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn toy_data(dir: &Path) -> PathBuf {
    let out = dir.join("toy");
    ok(&["simulate", "toy", "--seed", "1", "--n", "10000", "--out", p(&out)]);
    out.join("data.csv")
}

#[test]
fn fit_report_matches_exact_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path());
    let model = dir.path().join("m.otbe");
    ok(&["fit", "--data", p(&data), "--lambda", "0", "--dim", "1", "--context", "z", "--out", p(&model)]);
    let report = json(&dir.path().join("m.otbe.report.json"));
    let achieved = report["multi_correlation_w_y"].as_f64().unwrap();

    let exact = sem_to_moments(&SemSpec::toy(0.9, 1.0, 1.0)).unwrap();
    let oracle = fit_regression(&exact, &Roles::with_context(&["z"]), &FitConfig::new(0.0, 1)).unwrap();
    let with_w = oracle.augment(&exact, "x", "w").unwrap();
    let expected = multi_correlation(&with_w, "w", "y", RidgePolicy::Exact).unwrap();
    assert!((achieved - expected).abs() < 0.02, "{achieved} vs {expected}");
    assert_eq!(report["h_spectrum"].as_array().unwrap().len(), 2);
    assert!(report["term_c"].as_f64().is_some() && report["term_d"].as_f64().is_some());
    assert!(std::fs::read_to_string(&model).unwrap().starts_with("OTBE1\n"));
}

#[test]
fn bad_parameters_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path());
    let out = dir.path().join("m");
    let run = |lambda: &str, dim: &str| otbe(&["fit", "--data", p(&data), "--lambda", lambda, "--dim", dim, "--context", "z", "--out", p(&out)]);
    let r = run("1", "1");
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("lambda must be < 1"));
    assert_eq!(run("0.5", "0").status.code(), Some(2));
    assert_eq!(run("-0.1", "1").status.code(), Some(2));
    assert_eq!(run("0.5", "3").status.code(), Some(2));
    // toy data has no s_ columns
    let r = otbe(&["fit", "--data", p(&data), "--lambda", "0.5", "--dim", "1", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn transform_then_predict_equals_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path());
    let model = dir.path().join("m.otbe");
    ok(&["fit", "--data", p(&data), "--lambda", "0.7", "--dim", "1", "--context", "z", "--out", p(&model)]);
    let w = dir.path().join("w.csv");
    let direct = dir.path().join("direct.csv");
    let composed = dir.path().join("composed.csv");
    ok(&["transform", "--model", p(&model), "--data", p(&data), "--out", p(&w)]);
    ok(&["predict", "--model", p(&model), "--data", p(&data), "--out", p(&direct)]);
    ok(&["predict", "--model", p(&model), "--data", p(&w), "--out", p(&composed)]);
    assert_eq!(std::fs::read(&direct).unwrap(), std::fs::read(&composed).unwrap());

    // written features parse back to the exact in-process values
    let fm = FeatureModel::from_document(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let mut rdr = csv::Reader::from_path(&data).unwrap();
    let x: Vec<f64> = rdr
        .records()
        .take(50)
        .flat_map(|r| {
            let r = r.unwrap();
            vec![r[2].parse::<f64>().unwrap(), r[3].parse::<f64>().unwrap()]
        })
        .collect();
    let expected = fm.transform(&nalgebra::DMatrix::from_row_slice(50, 2, &x)).unwrap();
    let mut rdr = csv::Reader::from_path(&w).unwrap();
    for (i, r) in rdr.records().take(50).enumerate() {
        assert_eq!(r.unwrap()[0].parse::<f64>().unwrap(), expected[(i, 0)]);
    }

    let mean_row = dir.path().join("mean.csv");
    std::fs::write(&mean_row, format!("x_1,x_2\n{},{}\n", fm.x_mean[0], fm.x_mean[1])).unwrap();
    let zero = dir.path().join("zero.csv");
    ok(&["transform", "--model", p(&model), "--data", p(&mean_row), "--out", p(&zero)]);
    assert_eq!(std::fs::read_to_string(&zero).unwrap(), "w_1\n0\n");

    let wrong = dir.path().join("wrong.csv");
    std::fs::write(&wrong, "a,b\n1,2\n").unwrap();
    assert_eq!(otbe(&["predict", "--model", p(&model), "--data", p(&wrong), "--out", p(&zero)]).status.code(), Some(2));
}

fn two_class_csv(path: &Path, n: usize, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("label,ctx,f1,f2,f3\n");
    for i in 0..n {
        let y = (i % 2) as i64;
        let mu = if y == 0 { -2.0 } else { 2.0 };
        let g: Vec<f64> = (0..4).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let s = g[0] + if y == 0 { 1.0 } else { -0.5 };
        text.push_str(&format!("{y},{s},{},{},{}\n", mu + g[1], s + 0.5 * g[2], g[3]));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn classification_with_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cls.csv");
    two_class_csv(&data, 10_000, 9);
    let schema = dir.path().join("schema.json");
    std::fs::write(
        &schema,
        r#"{"columns": {"label": "outcome_class", "ctx": "context", "f1": "feature", "f2": "feature", "f3": "feature"}}"#,
    )
    .unwrap();
    let model = dir.path().join("c.otbe");
    ok(&["fit", "--data", p(&data), "--schema", p(&schema), "--task", "classify", "--lambda", "0.5", "--dim", "1", "--out", p(&model)]);
    let pred = dir.path().join("pred.csv");
    ok(&["predict", "--model", p(&model), "--data", p(&data), "--out", p(&pred)]);
    let truth: Vec<String> = csv::Reader::from_path(&data).unwrap().records().map(|r| r.unwrap()[0].to_string()).collect();
    let got: Vec<String> = csv::Reader::from_path(&pred).unwrap().records().map(|r| r.unwrap()[0].to_string()).collect();
    let acc = truth.iter().zip(&got).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
    assert!(acc >= 0.95, "accuracy {acc}");
    let report = json(&dir.path().join("c.otbe.report.json"));
    assert_eq!(report["training_accuracy"].as_f64().unwrap(), acc);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"columns": {"nope": "feature"}}"#).unwrap();
    let r = otbe(&["fit", "--data", p(&data), "--schema", p(&bad), "--task", "classify", "--lambda", "0.5", "--dim", "1", "--out", p(&model)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.csv");
    // class 1 has a single row, too few for its context covariance
    std::fs::write(&data, "y_1,s_1,x_1,x_2\n0,0.1,1,2\n0,0.5,2,1\n0,-0.3,0.5,0.2\n1,0.2,3,3\n").unwrap();
    let r = otbe(&["fit", "--data", p(&data), "--task", "classify", "--lambda", "0.5", "--dim", "1", "--out", p(&dir.path().join("m"))]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("moments"));
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("gap.csv");
    std::fs::write(&data, "y_1,s_1,x_1\n1,2,3\n1,,3\n").unwrap();
    let out = p(&dir.path().join("m")).to_string();
    let r = otbe(&["fit", "--data", p(&data), "--lambda", "0.5", "--dim", "1", "--out", &out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing value"));
    std::fs::write(&data, "y_1,s_1,x_1\n1,2,abc\n").unwrap();
    assert_eq!(otbe(&["fit", "--data", p(&data), "--lambda", "0.5", "--dim", "1", "--out", &out]).status.code(), Some(2));
    let r = Command::new(env!("CARGO_BIN_EXE_otbe"))
        .env("OTBE_THREADS", "zero")
        .args(["simulate", "toy", "--out", p(dir.path())])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"reps": 3, "typo": 1}"#).unwrap();
    assert_eq!(otbe(&["simulate", "lambda-curve", "--config", p(&cfg), "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(otbe(&["simulate", "grid", "--iters", "3", "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn degenerate_grid_is_all_ols() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.json");
    std::fs::write(&cfg, r#"{"triples": [[0.3, 0.5, -0.2]]}"#).unwrap();
    let out = dir.path().join("g");
    ok(&["simulate", "grid", "--config", p(&cfg), "--out", p(&out)]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["shares"]["ols"].as_f64(), Some(1.0));
    assert_eq!(summary["resolved_config"]["lambda_grid"].as_array().unwrap().len(), 41);

    std::fs::write(&cfg, r#"{"triples": [[0.99, 0.99, -0.99]]}"#).unwrap();
    assert_eq!(otbe(&["simulate", "grid", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(2));
}

#[test]
fn lambda_star_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["simulate", "lambda-star", "--iters", "60", "--seed", "42", "--out", p(out)]);
    }
    for f in ["lambda_star.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    assert_eq!(json(&a.join("summary.json"))["resolved_config"]["seed"].as_u64(), Some(42));
}

#[test]
fn lambda_curve_decays() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "lambda-curve", "--reps", "100", "--seed", "7", "--out", p(dir.path())]);
    let summary = json(&dir.path().join("summary.json"));
    assert!(summary["decay_fraction"].as_f64().unwrap() >= 0.95);
    let rows = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 100 * 41);
}
