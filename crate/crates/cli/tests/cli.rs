use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sfbp::config::EXAMPLE_JSON;

fn example() -> Value {
    serde_json::from_str(EXAMPLE_JSON).unwrap()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn sfbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfbp")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn short_example(horizon: f64) -> Value {
    let mut v = example();
    v["scenario"]["horizon"] = json!(horizon);
    v
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &short_example(0.2));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = sfbp(&["simulate", "--config", s(&cfg), "--paths", "1", "--seed", "7", "--out", s(d)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["ensemble_mean.csv", "final_profile.csv", "paths/path_0000.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let prov: Value = serde_json::from_slice(&fs::read(a.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], json!(7));
    assert_eq!(prov["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(prov["resolved_config"]["scenario"]["dt"]["value"], json!("1/1000"));
}

#[test]
fn missing_step_size_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = example();
    v["scenario"].as_object_mut().unwrap().remove("dt");
    let cfg = write_config(tmp.path(), "c.json", &v);
    let o = sfbp(&["simulate", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("scenario") && err.contains("dt"), "{err}");
}

#[test]
fn forced_non_convergence_exits_3_with_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = short_example(0.1);
    v["solver"] = json!({"theta": 0.5, "tol": 0.0, "max_iter": 3});
    let cfg = write_config(tmp.path(), "c.json", &v);
    let out = tmp.path().join("o");
    let o = sfbp(&["optimize", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let hist = fs::read_to_string(out.join("residual_history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 3);
    assert!(out.join("controls.csv").exists() && out.join("report.json").exists());
}

#[test]
fn zero_weights_converge_immediately() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = short_example(0.1);
    v["control"]["lambda1"] = json!(0);
    v["control"]["lambda2"] = json!(0);
    let cfg = write_config(tmp.path(), "c.json", &v);
    let out = tmp.path().join("o");
    let o = sfbp(&["optimize", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], json!(1));
    assert_eq!(report["residual"], json!(0.0));
}

#[test]
fn compare_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &short_example(0.1));
    let run = tmp.path().join("run");
    assert_eq!(sfbp(&["simulate", "--config", s(&cfg), "--paths", "2", "--out", s(&run)]).status.code(), Some(0));
    let cmp = tmp.path().join("cmp");
    let o = sfbp(&["compare", s(&run), s(&run), "--out", s(&cmp)]);
    assert_eq!(o.status.code(), Some(0));
    let summary: Value = serde_json::from_slice(&fs::read(cmp.join("compare.json")).unwrap()).unwrap();
    for (_, col) in summary["columns"].as_object().unwrap() {
        assert_eq!(col["max_abs_diff"], json!(0.0));
    }
    let table = fs::read_to_string(cmp.join("compare.csv")).unwrap();
    assert!(table.starts_with("node_index,rho,c_a,c_b,c_diff"));
}

#[test]
fn compare_rejects_mismatched_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &short_example(0.1));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(sfbp(&["simulate", "--config", s(&cfg), "--paths", "1", "--out", s(&a)]).status.code(), Some(0));
    let o = sfbp(&["simulate", "--config", s(&cfg), "--paths", "1", "--nodes", "9", "--out", s(&b)]);
    assert_eq!(o.status.code(), Some(0));
    let o = sfbp(&["compare", s(&a), s(&b)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid mismatch"));
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &short_example(0.1));
    let out = tmp.path().join("o");
    let args = ["simulate", "--config", s(&cfg), "--paths", "1", "--out", s(&out)];
    assert_eq!(sfbp(&args).status.code(), Some(0));
    assert_eq!(sfbp(&args).status.code(), Some(1));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(sfbp(&forced).status.code(), Some(0));

    // a foreign directory is never replaced
    let foreign = tmp.path().join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("keep.txt"), "x").unwrap();
    let o = sfbp(&["simulate", "--config", s(&cfg), "--paths", "1", "--out", s(&foreign), "--force"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(foreign.join("keep.txt").exists());
}

#[test]
fn optimized_controls_feed_simulate_and_mc() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &short_example(0.1));
    let opt = tmp.path().join("opt");
    assert_eq!(sfbp(&["optimize", "--config", s(&cfg), "--out", s(&opt)]).status.code(), Some(0));
    let mc = tmp.path().join("mc");
    let o = sfbp(&["mc", "--config", s(&cfg), "--paths", "3", "--controls", s(&opt), "--out", s(&mc)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let costs = fs::read_to_string(mc.join("path_costs.csv")).unwrap();
    assert_eq!(costs.lines().count(), 4);
    let prov: Value = serde_json::from_slice(&fs::read(mc.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["inputs"][1]["role"], json!("controls"));

    // the control grid must match the scenario
    let o = sfbp(&["simulate", "--config", s(&cfg), "--nodes", "9", "--controls", s(&opt), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn extinction_of_every_path_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = short_example(1.0);
    v["scenario"]["noise"]["h"] = json!("0");
    v["scenario"]["noise"]["r"] = json!("40");
    let cfg = write_config(tmp.path(), "c.json", &v);
    let o = sfbp(&["simulate", "--config", s(&cfg), "--paths", "3", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn brownian_dumps_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = short_example(0.1);
    v["output"]["emit_brownian"] = json!(true);
    let cfg = write_config(tmp.path(), "c.json", &v);
    let out = tmp.path().join("o");
    assert_eq!(sfbp(&["simulate", "--config", s(&cfg), "--paths", "1", "--out", s(&out)]).status.code(), Some(0));
    let bytes = fs::read(out.join("brownian/path_0000.bin")).unwrap();
    let p = sfbp::noise::BrownianPath::read_from(&bytes[..]).unwrap();
    assert_eq!((p.n_steps, p.channels), (100, 2));
}
