//! End-to-end tests of the `kvsim` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn kvsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvsim")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_scenario() -> Value {
    json!({
        "mesh": { "lower": [-1, -1, -1], "upper": [1, 1, 1], "divisions": [2, 2, 2] },
        "material": { "mu": 1.0e3, "lambda": 1.5e3, "c": 3.0e3 },
        "initial_condition": { "kind": "preset", "name": "stretch_x" },
        "tau": 0.05,
        "T": 0.5
    })
}

fn simulate(dir: &Path, cfg: &Value, out: &str, extra: &[&str]) -> Output {
    let config = write_config(dir, "scenario.json", cfg);
    let out = dir.join(out);
    let mut args = vec!["simulate", "--config", config.as_str(), "--output-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    kvsim(&args)
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("missing column {name}"))
}

#[test]
fn malformed_configs_fail_before_writing_anything() {
    let dir = TempDir::new().unwrap();
    let syntax = dir.path().join("broken.json");
    fs::write(&syntax, "{ \"tau\": ").unwrap();
    let out = dir.path().join("out");
    let run = kvsim(&["simulate", "--config", syntax.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!out.exists());

    let mut schema = small_scenario();
    schema["material"]["mu"] = json!("soft");
    let run = simulate(dir.path(), &schema, "out", &[]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("material.mu"));
    assert!(!out.exists());

    let mut semantic = small_scenario();
    semantic["tau"] = json!(0.3);
    semantic["material"]["c"] = json!(-1.0);
    let run = simulate(dir.path(), &semantic, "out", &[]);
    assert_eq!(run.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("`material`") && stderr.contains("`tau`"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn identity_without_loads_gives_a_zero_ledger() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_scenario();
    cfg["initial_condition"] = json!({ "kind": "identity" });
    let run = simulate(dir.path(), &cfg, "out", &[]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let (header, rows) = parse_csv(&fs::read_to_string(dir.path().join("out/ledger.csv")).unwrap());
    assert_eq!(rows.len(), 10);
    for name in ["elastic_energy", "external_work_cum", "diss_inc_quad", "diss_cum_quad", "diss_cum_printed"] {
        let c = column(&header, name);
        for r in &rows {
            assert!(r[c].abs() < 1e-9, "{name} = {}", r[c]);
        }
    }
}

#[test]
fn serial_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = small_scenario();
    for out in ["a", "b"] {
        let run = simulate(dir.path(), &cfg, out, &["--threads", "1"]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let a = fs::read(dir.path().join("a/ledger.csv")).unwrap();
    let b = fs::read(dir.path().join("b/ledger.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn summary_totals_match_ledger_sums() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_scenario();
    cfg["snapshot_every"] = json!(5);
    let run = simulate(dir.path(), &cfg, "out", &[]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let out = dir.path().join("out");
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let (header, rows) = parse_csv(&fs::read_to_string(out.join("ledger.csv")).unwrap());
    let inc = column(&header, "diss_inc_quad");
    let sum: f64 = rows.iter().map(|r| r[inc]).sum();
    let total = summary["cumulative_dissipation_quad"].as_f64().unwrap();
    assert!((sum - total).abs() <= 1e-12 * total.abs(), "{sum} vs {total}");
    let cum = rows.last().unwrap()[column(&header, "diss_cum_quad")];
    assert!((cum - total).abs() <= 1e-12 * total.abs());
    let w_final = rows.last().unwrap()[column(&header, "elastic_energy")];
    assert_eq!(w_final, summary["final_elastic_energy"].as_f64().unwrap());
    assert_eq!(summary["steps"], json!(10));
    // relaxation from the stretched state: energy goes into dissipation
    assert!(w_final < summary["initial_elastic_energy"].as_f64().unwrap());
    let snapshots: Vec<_> = fs::read_dir(out.join("snapshots")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(snapshots.len(), 3);
    let first = fs::read_to_string(out.join("snapshots/step_000005.vtk")).unwrap();
    assert!(first.starts_with("# vtk DataFile Version 3.0"));
    assert!(first.contains("VECTORS velocity double"));
}

#[test]
fn single_step_size_leaves_the_slope_undefined() {
    let dir = TempDir::new().unwrap();
    let mut scenario = small_scenario();
    scenario.as_object_mut().unwrap().remove("tau");
    let cfg = json!({ "scenario": scenario, "taus": [0.1], "resolutions": [1] });
    let config = write_config(dir.path(), "study.json", &cfg);
    let out = dir.path().join("study");
    let run = kvsim(&["convergence", "--config", &config, "--output-dir", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["slope"][0]["slope"], Value::Null);
    let csv = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(out.join("ledgers/n1_tau0.1.csv").exists());
}

#[test]
fn convergence_study_rejects_external_loads() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({ "scenario": { "loads": { "body_force": [0, 0, -1] } }, "taus": [0.1, 0.05] });
    let config = write_config(dir.path(), "study.json", &cfg);
    let out = dir.path().join("study");
    let run = kvsim(&["convergence", "--config", &config, "--output-dir", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn comparing_a_scheme_with_itself_gives_zero_deviation() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "scenario": { "mesh": { "divisions": [1, 1, 1] }, "T": 0.2 },
        "taus": [0.1, 0.05],
        "scheme_a": "linearized_explicit",
        "scheme_b": "linearized_explicit",
        "pointwise_samples": 3
    });
    let config = write_config(dir.path(), "compare.json", &cfg);
    let out = dir.path().join("cmp");
    let run = kvsim(&["oracle-compare", "--config", &config, "--output-dir", out.to_str().unwrap(), "--seed", "7"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let (header, rows) = {
        let text = fs::read_to_string(out.join("comparison.csv")).unwrap();
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        (header, rows)
    };
    assert_eq!(header.join(","), "tau,scheme_a,scheme_b,linf_deviation,l2_deviation");
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], json!(7));
    assert!(summary["pointwise_max_rel_error"].as_f64().unwrap() < 1e-6);
    assert_eq!(summary["failed_rows"], json!([]));
}

#[test]
fn published_schema_lists_every_scenario_field() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/scenario.schema.json")).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    let properties = schema["properties"].as_object().unwrap();
    let required: Vec<&str> = schema["required"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for (field, is_required) in kvsim_cli::config::scenario_fields() {
        assert!(properties.contains_key(field), "schema lacks `{field}`");
        assert_eq!(required.contains(&field), is_required, "required flag of `{field}`");
    }
    let known: Vec<&str> = kvsim_cli::config::scenario_fields().keys().copied().chain(["preset"]).collect();
    for key in properties.keys() {
        assert!(known.contains(&key.as_str()), "schema documents unknown field `{key}`");
    }
}
