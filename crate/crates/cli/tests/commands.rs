use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multiway_core::bootstrap::read_bands_csv;
use multiway_core::{load_csv, run_estimation, CsvSchema, Mode, RunConfig};
use serde_json::Value;

fn multiway(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_multiway"));
    cmd.args(args).env_remove("MC_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn simulate_small_cate_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"dgp": {"n_rows": 3, "n_cols": 3, "d": 2}}"#);
    let out = dir.path().join("out");
    ok(&multiway(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()], &[]));
    let text = fs::read_to_string(out.join("sample.csv")).unwrap();
    let lines = data_lines(&text);
    assert_eq!(lines[0], "row_id,col_id,y,t,w1,w2");
    assert_eq!(lines.len(), 10);
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(out.join("sample.json")).unwrap()).unwrap();
    assert_eq!(sidecar["true_tau_label"], "x - x");
    assert_eq!(sidecar["parameters"]["zeta"].as_array().unwrap().len(), 2);
}

#[test]
fn simulated_csv_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&multiway(&["simulate", "--out", out.to_str().unwrap(), "--seed", "17"], &[]));
    let cfg = RunConfig { seed: 17, ..RunConfig::default() };
    let (direct, _) = cfg.dgp.simulate(17).unwrap();
    let loaded = load_csv(out.join("sample.csv"), Mode::Cate, &CsvSchema::default()).unwrap();
    assert_eq!((loaded.n_rows(), loaded.n_cols()), (direct.n_rows(), direct.n_cols()));
    for (a, b) in loaded.cells().iter().zip(direct.cells()) {
        assert!((a.outcome - b.outcome).abs() <= 1e-12);
        assert_eq!(a.treatment, b.treatment);
        assert!((a.conditioning_value - b.conditioning_value).abs() <= 1e-12);
        for (x, y) in a.covariates.iter().zip(&b.covariates) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn cte_simulation_has_unit_interval_treatment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"mode": "cte"}"#);
    let out = dir.path().join("out");
    ok(&multiway(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()], &[]));
    let sample = load_csv(out.join("sample.csv"), Mode::Cte, &CsvSchema::default()).unwrap();
    assert!(sample.cells().iter().all(|o| o.treatment.value() > 0.0 && o.treatment.value() < 1.0));
}

#[test]
fn embedded_config_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    ok(&multiway(&["simulate", "--out", first.to_str().unwrap()], &[("MC_SEED", "123")]));
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(first.join("sample.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 123);
    let mut embedded = sidecar["config"].clone();
    embedded.as_object_mut().unwrap().remove("out");
    let cfg = write(dir.path(), "again.json", &embedded.to_string());
    let second = dir.path().join("b");
    ok(&multiway(&["simulate", "--config", &cfg, "--out", second.to_str().unwrap()], &[]));
    let a = fs::read_to_string(first.join("sample.csv")).unwrap();
    let b = fs::read_to_string(second.join("sample.csv")).unwrap();
    assert_eq!(data_lines(&a), data_lines(&b));
}

#[test]
fn toy_estimate_with_intercept_basis() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "toy.csv", "row_id,col_id,y,t,w1\na,x,1.0,1,0.1\na,y,0.2,0,0.4\nb,x,0.3,0,-0.3\nb,y,1.6,1,0.8\n");
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"estimation": {"estimators": ["full"], "basis": {"p": 1}, "bootstrap": {"draws": 200}}}"#,
    );
    let out = dir.path().join("out");
    ok(&multiway(&["estimate", "--config", &cfg, "--input", &data, "--out", out.to_str().unwrap()], &[]));
    let fit: Value = serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["estimators"][0]["beta"].as_array().unwrap().len(), 1);
    // with an intercept-only basis the fitted constant is the ATE point estimate
    let beta = fit["estimators"][0]["beta"][0].as_f64().unwrap();
    assert!((fit["estimators"][0]["ate"]["point"].as_f64().unwrap() - beta).abs() < 1e-12);
    let rows = read_bands_csv(fs::File::open(out.join("bands.csv")).unwrap()).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.tau_hat == rows[0].tau_hat));
}

#[test]
fn malformed_csv_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "bad.csv", "row_id,col_id,y,t,w1\n0,0,1.0,1,0.1\n0,1,oops,0,0.4\n1,0,0.9,1,-0.3\n1,1,0.1,0,0.8\n");
    let out = dir.path().join("out");
    let o = multiway(&["estimate", "--input", &data, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));

    let dup = write(dir.path(), "dup.csv", "row_id,col_id,y,t,w1\n0,0,1.0,1,0.1\n0,0,0.2,0,0.4\n1,0,0.9,1,-0.3\n1,1,0.1,0,0.8\n");
    let o = multiway(&["estimate", "--input", &dup, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"estimation": {"bootstrap": {"alpha": 1.5}}}"#);
    let out = dir.path().join("out");
    let o = multiway(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn constant_outcome_exits_with_numeric_code() {
    // a constant outcome is fitted exactly by both arms, leaving no score variance
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("row_id,col_id,y,t,w1,w2\n");
    for i in 0..4 {
        for j in 0..4 {
            let k = (i * 4 + j) as f64;
            text.push_str(&format!("{i},{j},1.0,{},{},{}\n", (i + j) % 2, (k * 0.7).sin(), (k * 0.3).cos()));
        }
    }
    let data = write(dir.path(), "flat.csv", &text);
    let cfg = write(dir.path(), "c.json", r#"{"estimation": {"estimators": ["full"], "basis": {"p": 1}, "bootstrap": {"draws": 100}}}"#);
    let out = dir.path().join("out");
    let o = multiway(&["estimate", "--config", &cfg, "--input", &data, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulated_estimate_round_trips_bands() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&multiway(&["simulate", "--out", sim.to_str().unwrap(), "--seed", "5"], &[]));
    let cfg_text = r#"{"seed": 8, "estimation": {"bootstrap": {"draws": 200}}}"#;
    let cfg = write(dir.path(), "c.json", cfg_text);
    let out = dir.path().join("est");
    let input = sim.join("sample.csv");
    ok(&multiway(&["estimate", "--config", &cfg, "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]));

    let rc = RunConfig::from_json(cfg_text).unwrap();
    let sample = load_csv(&input, Mode::Cate, &CsvSchema::default()).unwrap();
    let expected = run_estimation(&sample, &rc.estimation, 8).unwrap();
    let rows = read_bands_csv(fs::File::open(out.join("bands.csv")).unwrap()).unwrap();
    let mut it = rows.iter();
    for r in &expected.results {
        for b in &r.bands {
            for l in 0..b.grid.len() {
                let row = it.next().unwrap();
                assert_eq!((row.estimator.as_str(), row.method.as_str()), (r.estimator.name(), b.method.name()));
                assert_eq!(
                    (row.x, row.tau_hat, row.se, row.lower, row.upper),
                    (b.grid.points[l], b.tau_hat[l], b.se[l], b.lower[l], b.upper[l])
                );
            }
        }
    }
    assert!(it.next().is_none());
}

#[test]
fn coverage_smoke_is_deterministic_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"replications": 2, "estimation": {"bootstrap": {"draws": 100}}}"#);
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        ok(&multiway(&["coverage", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", workers], &[]));
        (fs::read(out.join("coverage.json")).unwrap(), fs::read_to_string(out.join("coverage.tsv")).unwrap())
    };
    let (a, tsv) = run("a", "1");
    let (b, _) = run("b", "4");
    let (c, _) = run("c", "4");
    assert_eq!(a, c.clone());
    assert_eq!(b, c);
    let doc: Value = serde_json::from_slice(&a).unwrap();
    for cell in doc["reports"][0]["cells"].as_array().unwrap() {
        let r = cell["rate"].as_f64().unwrap();
        assert!([0.0, 0.5, 1.0].contains(&r));
    }
    assert!(doc["reports"][0].get("runtime").is_none());
    let header = data_lines(&tsv)[0];
    assert!(header.starts_with("shape\tfull_sample/pointwise"));
}
