use std::path::Path;
use std::process::{Command, Output};

use implicit_ldl::data::{load_csv, LabelDistribution};
use implicit_ldl::metrics::{evaluate, MetricsReport};

fn ildl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ildl"))
        .args(args)
        .current_dir(dir)
        .env("ILDL_OUT_DIR", dir.join("out"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ildl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_header_rows_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "100", "5", "4", "--seed", "2", "--out", "s.csv"]);
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "f0,f1,f2,f3,f4,y0,y1,y2,y3");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.split(',').count() == 9));

    let ds = load_csv(&dir.path().join("s.csv")).unwrap();
    let fresh = implicit_ldl::data::synthesize(100, 5, 4, 2).unwrap().dataset;
    assert_eq!(ds.samples(), fresh.samples());
    let truth = json(&dir.path().join("s.csv.truth.json"));
    assert_eq!(truth["kind"], "synth-ground-truth");
    assert_eq!(truth["ground_truth"]["weight"].as_array().unwrap().len(), 4);
}

#[test]
fn out_dir_defaults_from_env() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "10", "2", "3"]);
    assert!(dir.path().join("out/synth-10x2x3-s0.csv").exists());
}

#[test]
fn uniform_cv_intersection_identity() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "100", "3", "4", "--seed", "1", "--out", "d.csv"]);
    ok(dir.path(), &["cv", "--algo", "uniform", "--data", "d.csv", "--k", "5", "--repeats", "2"]);
    let report: MetricsReport = serde_json::from_value(json(&dir.path().join("out/cv-uniform.json"))).unwrap();
    let ds = load_csv(&dir.path().join("d.csv")).unwrap();
    let u = LabelDistribution::uniform(4);
    let mean_l1 = ds
        .samples()
        .iter()
        .map(|s| s.target.values().iter().zip(u.values()).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum::<f64>()
        / ds.len() as f64;
    assert!((report.intersection.mean - (1.0 - 0.5 * mean_l1)).abs() < 1e-12);
    assert_eq!(report.folds, 10);
    let csv = std::fs::read_to_string(dir.path().join("out/cv-uniform.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), MetricsReport::csv_header());
}

#[test]
fn idr_and_bfgsll_reports_are_comparable() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--synth", "80,3,3,4", "--k", "2", "--repeats", "1", "--epochs", "2", "--hidden", "16", "--map-size", "4"];
    for algo in ["idr", "bfgsll"] {
        let mut args = vec!["cv", "--algo", algo];
        args.extend(common);
        ok(dir.path(), &args);
    }
    let a = json(&dir.path().join("out/cv-idr.json"));
    let b = json(&dir.path().join("out/cv-bfgsll.json"));
    assert_eq!(a["dataset"], b["dataset"]);
    assert_eq!(a["folds"], b["folds"]);
    assert_eq!(a["samples"], b["samples"]);
}

#[test]
fn train_eval_convert_energy_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "200", "4", "3", "--seed", "5", "--out", "d.csv"]);
    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, "# small model\nhidden = 16\nmap_size = 6\nepochs = 8\n").unwrap();
    ok(d, &["train", "--data", "d.csv", "--config", "run.cfg", "--out-dir", "tr"]);
    assert!(d.join("tr/history.csv").exists());
    let model = json(&d.join("tr/model.json"));
    assert_eq!(model["schema_version"], 1);
    assert_eq!(model["config"]["hidden"], 16);

    ok(d, &["eval", "--data", "d.csv", "--checkpoint", "tr/model.json", "--out-dir", "ev"]);
    let report: MetricsReport = serde_json::from_value(json(&d.join("ev/eval.json"))).unwrap();
    assert!(report.means().to_array().iter().all(|v| v.is_finite()));

    ok(d, &["convert-snn", "--data", "d.csv", "--checkpoint", "tr/model.json", "--out-dir", "sn"]);
    let energy = json(&d.join("sn/energy.json"));
    assert_eq!(energy["kind"], "energy-report");
    assert!(energy["ann_macs"].as_u64().unwrap() > 0);

    ok(d, &["eval", "--data", "d.csv", "--checkpoint", "sn/snn.json", "--t-sim", "64", "--out-dir", "es"]);
    let agreement = json(&d.join("es/snn-agreement.json"));
    assert!(agreement["mean_kl"].as_f64().unwrap() < 0.05, "{agreement}");

    ok(d, &["energy", "--data", "d.csv", "--checkpoint", "sn/snn.json", "--t-sim", "8", "--out-dir", "en"]);
    let e8 = json(&d.join("en/energy.json"));
    assert!(e8["snn_synops"].as_u64().unwrap() < energy["snn_synops"].as_u64().unwrap());

    ok(d, &["train", "--algo", "bfgsll", "--data", "d.csv", "--out-dir", "bf"]);
    ok(d, &["eval", "--data", "d.csv", "--checkpoint", "bf/model.json", "--out-dir", "ebf"]);
    let bf: MetricsReport = serde_json::from_value(json(&d.join("ebf/eval.json"))).unwrap();
    assert!(bf.kl.mean < 0.01);
}

#[test]
fn schema_and_shape_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "60", "4", "3", "--out", "a.csv"]);
    ok(d, &["synth", "60", "4", "5", "--out", "b.csv"]);
    ok(d, &["train", "--data", "a.csv", "--epochs", "1", "--hidden", "8", "--map-size", "4", "--out-dir", "tr"]);

    let out = ildl(d, &["eval", "--data", "b.csv", "--checkpoint", "tr/model.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema mismatch"));

    let text = std::fs::read_to_string(d.join("tr/model.json")).unwrap();
    std::fs::write(d.join("v2.json"), text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1)).unwrap();
    let out = ildl(d, &["eval", "--data", "a.csv", "--checkpoint", "v2.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));

    let out = ildl(d, &["eval", "--data", "a.csv", "--checkpoint", "missing.json"]);
    assert!(!out.status.success());

    let out = ildl(d, &["cv", "--data", "a.csv", "--synth", "10,2,3"]);
    assert!(!out.status.success());
}

#[test]
fn sidecar_supplies_cv_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "30", "2", "3", "--out", "g.csv"]);
    std::fs::write(d.join("g.csv.cfg"), "name = gene\nk = 3\nrepeats = 1\n").unwrap();
    ok(d, &["cv", "--algo", "uniform", "--data", "g.csv"]);
    let report = json(&d.join("out/cv-uniform.json"));
    assert_eq!(report["dataset"], "gene");
    assert_eq!(report["folds"], 3);
    // A flag overrides the sidecar.
    ok(d, &["cv", "--algo", "uniform", "--data", "g.csv", "--k", "2"]);
    assert_eq!(json(&d.join("out/cv-uniform.json"))["folds"], 2);
}

#[test]
fn eval_metrics_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "40", "3", "3", "--out", "a.csv"]);
    ok(d, &["train", "--algo", "bfgsll", "--data", "a.csv", "--out-dir", "bf"]);
    ok(d, &["eval", "--data", "a.csv", "--checkpoint", "bf/model.json", "--out-dir", "ev"]);
    let report: MetricsReport = serde_json::from_value(json(&d.join("ev/eval.json"))).unwrap();
    let ck: implicit_ldl::baseline::BaselineCheckpoint =
        serde_json::from_value(json(&d.join("bf/model.json"))).unwrap();
    let ds = load_csv(&d.join("a.csv")).unwrap();
    let mean_cheb = ds
        .samples()
        .iter()
        .map(|s| evaluate(s.target.values(), ck.model.predict(&s.features).unwrap().values()).unwrap().chebyshev)
        .sum::<f64>()
        / ds.len() as f64;
    assert!((report.chebyshev.mean - mean_cheb).abs() < 1e-12);
}
