use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn geofuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geofuse"))
        .args(args)
        .output()
        .expect("run geofuse")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn small_data(seed: u64) -> Value {
    json!({"synthetic": {"n_train": 400, "n_val": 120, "n_test": 120, "feature_dim": 8, "seed": seed}})
}

fn small_model() -> Value {
    json!({"encoder": "wrap", "fusion": "concat", "width": 16, "blocks": 1})
}

fn train(dir: &Path, name: &str, cfg: Value) -> (PathBuf, Value) {
    let path = write_config(dir, &format!("{name}.json"), &cfg);
    let out = dir.join(name);
    let o = geofuse(&["train", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    (out, report)
}

fn line_count(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn gen_data_defaults_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = geofuse(&["gen-data", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(line_count(&a.join("train.csv")), 10_001);
    assert_eq!(line_count(&a.join("val.csv")), 2_001);
    assert_eq!(line_count(&a.join("test.csv")), 2_001);
    assert!(a.join("manifest.json").exists());

    let cfg = write_config(dir.path(), "small.json", &json!({"data": small_data(0)}));
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = geofuse(&[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        fs::read(out.join("train.csv")).unwrap()
    };
    let s1 = run("s1", "1");
    let s2 = run("s2", "2");
    let s1b = run("s1b", "1");
    assert_ne!(s1, s2);
    assert_eq!(s1, s1b);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &json!({"train": {"alhpa": 0.2}}));
    let o = geofuse(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let mix = write_config(
        dir.path(),
        "mix.json",
        &json!({"data": {"synthetic": {"train_mixture": [0.5, 0.6, 0.0, 0.0, 0.0, 0.0]}}}),
    );
    let o = geofuse(&["gen-data", "--config", mix.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert_eq!(code(&geofuse(&["frobnicate"])), 1);
}

#[test]
fn train_tags_echo_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (_, erm) = train(
        dir.path(),
        "erm",
        json!({"data": small_data(3), "train": {"epochs": 2}}),
    );
    assert_eq!(erm["method"], "ERM");

    let (out, dp) = train(
        dir.path(),
        "dp",
        json!({"data": small_data(3), "model": small_model(), "train": {"alpha": 0.2, "epochs": 2, "seed": 5}}),
    );
    assert_eq!(dp["method"], "Concat+DP");
    assert_eq!(dp["config"]["train"]["alpha"], 0.2);
    assert_eq!(dp["seed"], 5);
    assert!(out.join("checkpoint.json").exists());
    assert!(out.join("timing.json").exists());

    // The echo alone reproduces the run.
    let echo = write_config(dir.path(), "echo.json", &dp["config"]);
    let rerun = dir.path().join("rerun");
    let o = geofuse(&["train", "--config", echo.to_str().unwrap(), "--out", rerun.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let again: Value = serde_json::from_slice(&fs::read(rerun.join("report.json")).unwrap()).unwrap();
    assert_eq!(again["test"], dp["test"]);
    assert_eq!(again["history"], dp["history"]);

    let dro = write_config(
        dir.path(),
        "dro.json",
        &json!({"data": small_data(3), "model": small_model(), "train": {"alpha": 0.0, "epochs": 1, "objective": "group_dro"}}),
    );
    let o = geofuse(&["train", "--config", dro.to_str().unwrap(), "--out", dir.path().join("dro").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("Concat+GroupDRO"));
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "nan.json",
        &json!({"data": small_data(1), "model": small_model(), "train": {"epochs": 3, "lr0": 1e300}}),
    );
    let o = geofuse(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn eval_matches_report_and_checks_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let cfg = write_config(dir.path(), "data.json", &json!({"data": small_data(4)}));
    assert_eq!(
        code(&geofuse(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data_dir.to_str().unwrap()])),
        0
    );
    let (out, report) = train(
        dir.path(),
        "m",
        json!({"data": {"dir": {"path": data_dir}}, "model": small_model(), "train": {"epochs": 2}}),
    );
    let ck = out.join("checkpoint.json");
    let metrics = dir.path().join("metrics.json");
    let o = geofuse(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(m, report["test"]);
    let groups = m["per_group"].as_object().unwrap();
    assert_eq!(groups.len(), 6);
    let min = groups
        .values()
        .map(|g| g["value"].as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(m["worst"].as_f64().unwrap(), min);
    let text = stdout(&o);
    for d in 0..6 {
        assert!(text.lines().any(|l| l.starts_with(&format!("{d},"))));
    }

    // Different feature width: schema mismatch.
    let other = dir.path().join("other");
    let ocfg = write_config(
        dir.path(),
        "other.json",
        &json!({"data": {"synthetic": {"n_train": 50, "n_val": 20, "n_test": 20, "feature_dim": 5}}}),
    );
    assert_eq!(
        code(&geofuse(&["gen-data", "--config", ocfg.to_str().unwrap(), "--out", other.to_str().unwrap()])),
        0
    );
    let o = geofuse(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", other.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn ablate_rows_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "base.json",
        &json!({"data": {"synthetic": {"n_train": 150, "n_val": 60, "n_test": 60, "feature_dim": 6}},
                "model": {"encoder": "wrap", "fusion": "film", "width": 8, "blocks": 1},
                "train": {"epochs": 1}}),
    );
    let out = dir.path().join("sweep.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_geofuse"))
        .args(["ablate", "--config", cfg.to_str().unwrap(), "--seeds", "1,0", "--out", out.to_str().unwrap()])
        .env("GEOFUSE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("alpha,seed,avg,worst"));
    let rows: Vec<(f64, u64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 10);
    let alphas: Vec<f64> = rows.iter().step_by(2).map(|r| r.0).collect();
    assert_eq!(alphas, vec![0.0, 0.001, 0.01, 0.1, 0.2]);
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    assert_eq!(rows, sorted);
}

#[test]
fn cluster_map_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = train(
        dir.path(),
        "bands",
        json!({"data": {"synthetic": {"num_domains": 2, "train_mixture": [0.5, 0.5], "test_mixture": [0.5, 0.5],
                                      "n_train": 200, "n_val": 50, "n_test": 50, "feature_dim": 6}},
               "model": small_model(), "train": {"epochs": 2}}),
    );
    let ck = out.join("checkpoint.json");
    let svg = dir.path().join("map.svg");
    let o = geofuse(&["cluster-map", "--checkpoint", ck.to_str().unwrap(), "--n", "500", "--k", "2", "--out", svg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("map.svg"));
    assert!(text.contains("purity: "));
    let body = fs::read_to_string(&svg).unwrap();
    assert!(body.starts_with("<svg"));
    assert_eq!(body.matches("<circle").count(), 500);

    let csv = dir.path().join("map.csv");
    let o = geofuse(&[
        "cluster-map", "--checkpoint", ck.to_str().unwrap(), "--n", "500", "--k", "2", "--format", "csv",
        "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let clusters: std::collections::BTreeSet<String> = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().to_string())
        .collect();
    assert_eq!(clusters.len(), 2);

    let (erm, _) = train(dir.path(), "erm", json!({"data": small_data(0), "train": {"epochs": 1}}));
    let o = geofuse(&[
        "cluster-map", "--checkpoint", erm.join("checkpoint.json").to_str().unwrap(), "--n", "10",
        "--out", dir.path().join("no.svg").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
    let (emb, _) = train(
        dir.path(),
        "emb",
        json!({"data": small_data(0), "model": {"encoder": "domain_embed", "fusion": "concat", "width": 8, "blocks": 1}, "train": {"epochs": 1}}),
    );
    let o = geofuse(&[
        "cluster-map", "--checkpoint", emb.join("checkpoint.json").to_str().unwrap(), "--n", "10",
        "--out", dir.path().join("no2.svg").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn pareto_frontier_and_scatter() {
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = train(dir.path(), "erm", json!({"data": small_data(2), "train": {"epochs": 1}}));
    let good = out.join("report.json");
    let single = dir.path().join("single");
    let o = geofuse(&["pareto", good.to_str().unwrap(), "--out", single.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(single.join("pareto.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("ERM,"));

    let mut worse = report.clone();
    worse["method"] = json!("Dominated");
    worse["test"]["average"] = json!(report["test"]["average"].as_f64().unwrap() - 0.1);
    worse["test"]["worst"] = json!(report["test"]["worst"].as_f64().unwrap() - 0.1);
    let worse_path = write_config(dir.path(), "worse.json", &worse);
    let both = dir.path().join("both");
    let o = geofuse(&["pareto", good.to_str().unwrap(), worse_path.to_str().unwrap(), "--out", both.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(both.join("pareto.csv")).unwrap();
    assert!(!csv.contains("Dominated"));
    let svg = fs::read_to_string(both.join("pareto.svg")).unwrap();
    assert!(svg.contains("Dominated"));
    assert!(svg.contains(">ERM<"));

    let bad = write_config(dir.path(), "bad.json", &json!({"method": "x"}));
    let o = geofuse(&["pareto", bad.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}
