mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cencov::io::{write_censored_csv, FitReport};
use cencov::simulation::{generate_dataset, GridEntry, Method};
use cencov::{fit_estimator, Dataset, EstimatorKind, EstimatorSpec, FitOptions, LambdaMode, NuisanceConfig};
use serde_json::{json, Value};
use tempfile::TempDir;

fn cencov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cencov"))
        .args(args)
        .env_remove("CENCOV_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&v).expect("schema compiles")
}

fn assert_valid(name: &str, doc: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

/// A censored CSV drawn from the bundled independent design.
fn simulated_csv(dir: &Path, n: usize, rep: u64) -> (PathBuf, cencov::simulation::Scenario, cencov::simulation::SimulatedData) {
    let mut s = common::load("ind_known");
    s.n = n;
    let data = generate_dataset(&s, rep).unwrap();
    let path = dir.join("data.csv");
    write_censored_csv(&path, &data, true).unwrap();
    (path, s, data)
}

fn small_scenario(dir: &Path, reps: usize) -> PathBuf {
    let mut s = common::load("ind_known");
    s.name = "small".into();
    s.n = 200;
    s.replications = reps;
    let entry = |label: &str, m: Method, lambda: LambdaMode| GridEntry {
        label: label.into(),
        estimator: m,
        psi_mode: Default::default(),
        lambda_mode: lambda,
        probability_source: Default::default(),
        injectors: vec![],
        nuisance: None,
    };
    s.grid = vec![
        entry("Oracle", Method::Oracle, LambdaMode::None),
        entry("CC", Method::Cc, LambdaMode::None),
        entry("ACC", Method::Acc, LambdaMode::Plain),
    ];
    write_json(dir, "small.json", &serde_json::to_value(&s).unwrap())
}

#[test]
fn version_prints_crate_version() {
    let o = cencov(&["version"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), format!("cencov {}", cencov::VERSION));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = cencov(&["simulate", "--nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_indicator_column_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("d.csv"), "y,w,z1\n1,2,0\n2,3,1\n").unwrap();
    let cfg = write_json(dir.path(), "cfg.json", &json!({"input": dir.path().join("d.csv"), "estimator": "cc"}));
    let o = cencov(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("'delta'"), "{}", stderr(&o));
}

#[test]
fn forbidden_combination_exits_2() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("d.csv"), "y,x,r,z1\n1,,0,0\n2,3,1,1\n").unwrap();
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        &json!({"input": dir.path().join("d.csv"), "layout": "missing", "estimator": "mle", "dependence": "dep"}),
    );
    let o = cencov(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("MLE") && msg.contains("dependent missingness"), "{msg}");
}

#[test]
fn malformed_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(cencov(&["fit", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn complete_case_fit_recovers_truth() {
    let dir = TempDir::new().unwrap();
    let (csv, _, _) = simulated_csv(dir.path(), 1000, 5);
    let out = dir.path().join("fit.json");
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        &json!({"input": csv, "estimator": "cc", "columns": {"age": "a"}, "seed": 17}),
    );
    let o = cencov(&["fit", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_valid("fit_report", &doc);
    let report: FitReport = serde_json::from_value(doc).unwrap();
    assert_eq!(report.seed, 17);
    let names: Vec<&str> = report.coefficients.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["intercept", "a_minus_x", "z1", "sigma"]);
    for (c, truth) in report.coefficients.iter().zip([1.0, 3.0, 2.0]) {
        assert!((c.estimate - truth).abs() < 4.0 * c.se, "{} = {} (se {})", c.name, c.estimate, c.se);
        assert!(c.ci_lower < c.estimate && c.estimate < c.ci_upper);
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("a_minus_x"));
}

#[test]
fn fit_round_trip_is_bit_exact() {
    let dir = TempDir::new().unwrap();
    let (csv, scenario, data) = simulated_csv(dir.path(), 400, 2);
    let nuisance = NuisanceConfig::Known { bundle: scenario.known_bundle() };
    let out = dir.path().join("fit.json");
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        &json!({
            "input": csv,
            "estimator": "acc",
            "lambda_mode": "plain",
            "columns": {"age": "a"},
            "nuisance": nuisance,
            "output": out,
        }),
    );
    let o = cencov(&["fit", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: FitReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();

    let ds = Dataset::censored(&data.records, scenario.mean_spec()).unwrap();
    let spec = EstimatorSpec::new(EstimatorKind::Acc).with_lambda(LambdaMode::Plain);
    let direct = fit_estimator(spec, &ds, &nuisance, &FitOptions::default()).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&report.result.theta_hat.to_vec()), bits(&direct.theta_hat.to_vec()));
    assert_eq!(bits(&report.result.se), bits(&direct.se));
}

#[test]
fn non_convergence_exits_3_with_diagnostics() {
    let dir = TempDir::new().unwrap();
    let (csv, _, _) = simulated_csv(dir.path(), 200, 1);
    let out = dir.path().join("fit.json");
    let cfg = write_json(
        dir.path(),
        "cfg.json",
        &json!({
            "input": csv,
            "estimator": "cc",
            "columns": {"age": "a"},
            "solver": {"max_iter": 1, "tol": 0.0},
            "output": out,
        }),
    );
    let o = cencov(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_valid("non_convergence_report", &doc);
    assert_eq!(doc["iterations"], 1);
}

#[test]
fn simulate_is_deterministic_and_schema_valid() {
    let dir = TempDir::new().unwrap();
    let scen = small_scenario(dir.path(), 4);
    let run = |sub: &str, threads: &str| {
        let out = dir.path().join(sub);
        let o = cencov(&[
            "simulate",
            "--scenario",
            scen.to_str().unwrap(),
            "--threads",
            threads,
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (std::fs::read(out.join("small_summary.csv")).unwrap(), String::from_utf8_lossy(&o.stdout).into_owned(), out)
    };
    let (a, table, out) = run("a", "1");
    let (b, _, _) = run("b", "1");
    let (c, _, _) = run("c", "3");
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(table.contains("Oracle") && table.contains("ACC"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("small_summary.json")).unwrap()).unwrap();
    assert_valid("simulation_summary", &doc);
    assert_eq!(doc["rows"].as_array().unwrap().len(), 9);
}

#[test]
fn threads_fall_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let scen = small_scenario(dir.path(), 2);
    let out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_cencov"))
        .args(["simulate", "--scenario", scen.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .env("CENCOV_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let bad = Command::new(env!("CARGO_BIN_EXE_cencov"))
        .args(["simulate", "--scenario", scen.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .env("CENCOV_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn single_replication_reports_no_sd() {
    let dir = TempDir::new().unwrap();
    let scen = small_scenario(dir.path(), 5);
    let out = dir.path().join("one");
    let o = cencov(&[
        "simulate",
        "--scenario",
        scen.to_str().unwrap(),
        "--replications",
        "1",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("small_summary.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let sd_col = headers.iter().position(|h| h == "sd_x100").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[sd_col].is_empty()));
    assert!(String::from_utf8_lossy(&o.stdout).contains("NA"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(out.join("small_summary.json")).unwrap()).unwrap();
    assert_valid("simulation_summary", &doc);
    assert!(doc["rows"].as_array().unwrap().iter().all(|r| r["sd_x100"].is_null()));
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = TempDir::new().unwrap();
    let mut s: Value = serde_json::from_str(&std::fs::read_to_string(common::scenario_path("ind_known")).unwrap()).unwrap();
    s["n"] = json!(0);
    let p = write_json(dir.path(), "bad.json", &s);
    let o = cencov(&["simulate", "--scenario", p.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn failure_cap_exits_4() {
    let dir = TempDir::new().unwrap();
    let scen = small_scenario(dir.path(), 2);
    let mut s: Value = serde_json::from_str(&std::fs::read_to_string(&scen).unwrap()).unwrap();
    s["solver"] = json!({"max_iter": 1, "tol": 0.0});
    let p = write_json(dir.path(), "cap.json", &s);
    let o = cencov(&["simulate", "--scenario", p.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("cap"));
}
