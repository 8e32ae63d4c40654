use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn probekd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probekd"))
        .args(args)
        .current_dir(dir)
        .env_remove("PROBEKD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

#[test]
fn gen_probe_distill_report_smoke_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("teacher.json"), r#"{"seed": 3}"#).unwrap();
    let out = probekd(d, &["gen", "--spec", "teacher.json", "--n", "400", "--out", "c.hsc"]);
    assert!(out.status.success(), "{out:?}");
    let first = fs::read(d.join("c.hsc")).unwrap();
    assert!(probekd(d, &["gen", "--spec", "teacher.json", "--n", "400", "--out", "c.hsc"]).status.success());
    assert_eq!(fs::read(d.join("c.hsc")).unwrap(), first, "gen is idempotent");

    let out = probekd(d, &["train-probe", "--cache", "c.hsc", "--kind", "mlp", "--out", "p.pkp"]);
    assert!(out.status.success(), "{out:?}");
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(line["eval_accuracy"].as_f64().unwrap() > 0.4);

    let out = probekd(d, &[
        "distill", "--cache", "c.hsc", "--method", "probe_kd", "--probe", "p.pkp", "--fraction", "0.5",
        "--seed", "42", "--out", "r.json",
    ]);
    assert!(out.status.success(), "{out:?}");
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(rec["method"], "probe_kd");
    assert_eq!(rec["probe"], "mlp");
    assert_eq!(rec["fraction"], 0.5);
    assert_eq!(fs::read(d.join("c.hsc")).unwrap(), first, "inputs untouched");

    let out = probekd(d, &["report", "--in", "r.json", "--by", "method,fraction", "--out", "t.csv"]);
    assert!(out.status.success(), "{out:?}");
    let csv = fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("probe_kd/mlp,0.5,1,"));
    assert!(d.join("t.json").exists());
}

#[test]
fn probe_kd_without_probe_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = probekd(dir.path(), &["distill", "--cache", "c.hsc", "--method", "probe_kd", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert!(err["message"].as_str().unwrap().contains("probe"));
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = probekd(d, &["gen", "--out", "c.hsc", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("frobnicate"));

    let out = probekd(d, &["train-probe", "--cache", "missing.hsc", "--kind", "mlp", "--out", "p.pkp"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("missing.hsc"));

    fs::write(d.join("junk.hsc"), b"NOPE0000000000000000000000000000000000000").unwrap();
    let out = probekd(d, &["train-probe", "--cache", "junk.hsc", "--kind", "mlp", "--out", "p.pkp"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "data");

    fs::write(d.join("bad.json"), r#"{"seed": 1, "sead": 2}"#).unwrap();
    let out = probekd(d, &["gen", "--spec", "bad.json", "--out", "c.hsc"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("sead"));
    assert!(!d.join("c.hsc").exists());
}

#[test]
fn small_sweep_counts_resumes_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("plan.json"),
        r#"{"version": 1, "n_examples": 500, "methods": ["supervised", "probe_kd"],
            "fractions": [0.5, 1.0], "seeds": [42, 43], "output_dir": "out"}"#,
    )
    .unwrap();
    let out = probekd(d, &["sweep", "--plan", "plan.json", "--jobs", "2"]);
    assert!(out.status.success(), "{out:?}");
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["total"], 8);
    assert_eq!(summary["completed"], 8);
    assert_eq!(fs::read_dir(d.join("out/runs")).unwrap().count(), 8);
    let csv = fs::read(d.join("out/table.csv")).unwrap();

    // drop one record: a rerun recomputes only that run
    let victim = fs::read_dir(d.join("out/runs")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(&victim).unwrap();
    let out = probekd(d, &["sweep", "--plan", "plan.json"]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["completed"], 1);
    assert_eq!(summary["skipped"], 7);
    assert_eq!(fs::read(d.join("out/table.csv")).unwrap(), csv);

    // from scratch in a second directory
    fs::remove_dir_all(d.join("out")).unwrap();
    assert!(probekd(d, &["sweep", "--plan", "plan.json"]).status.success());
    assert_eq!(fs::read(d.join("out/table.csv")).unwrap(), csv);
}

#[test]
fn env_var_sets_only_the_default_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("plan.json"),
        r#"{"n_examples": 300, "methods": ["supervised"], "fractions": [1.0], "seeds": [1]}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_probekd"))
        .args(["sweep", "--plan", "plan.json"])
        .current_dir(d)
        .env("PROBEKD_OUT_DIR", d.join("elsewhere"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    assert!(d.join("elsewhere/table.csv").exists());
}

#[test]
fn invalid_plans_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("plan.json"), r#"{"methods": ["supervised"], "colour": "red"}"#).unwrap();
    let out = probekd(dir.path(), &["sweep", "--plan", "plan.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("colour"));
}
