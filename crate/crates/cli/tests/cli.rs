//! End-to-end checks against the compiled binary: bundle IO round trips,
//! report shape and determinism, corrupt-input handling, oracle agreement.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_compquant"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn compquant");
    assert!(
        out.status.success(),
        "compquant {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn compquant");
    assert!(
        !out.status.success(),
        "compquant {args:?} unexpectedly passed"
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_bundle(dir: &Path, seed: u64, noise: f64) -> PathBuf {
    let path = dir.join(format!("s{seed}.qbnd"));
    run_ok(&[
        "gen",
        "--seed",
        &seed.to_string(),
        "--m",
        "4",
        "--n",
        "8",
        "--k",
        "32",
        "--noise-level",
        &noise.to_string(),
        "--output",
        path.to_str().unwrap(),
    ]);
    path
}

fn report_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("report is valid JSON")
}

#[test]
fn run_report_has_stable_shape() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), 7, 0.05);
    let out = run_ok(&[
        "run",
        "--bundle",
        bundle.to_str().unwrap(),
        "--use-p1",
        "--use-p2",
        "--bits",
        "3",
        "--group-size",
        "4",
    ]);
    let report = report_json(&out);
    assert_eq!(report["schema"], 1);
    assert_eq!(report["command"], "run");
    assert_eq!(report["config"]["bits"], 3);
    assert_eq!(report["config"]["use_p1"], true);
    let layer = &report["layers"][0];
    assert_eq!(layer["method"], "gptaq-cae");
    assert!(layer["sym_err"].as_f64().unwrap() >= 0.0);
    assert!(layer["asym_err"].as_f64().unwrap() >= 0.0);
    // Quantization at 3 bits can only do so much: the engine must still
    // beat plain rounding on its own objective.
    assert!(layer["sym_err"].as_f64().unwrap() <= layer["rtn_sym_err"].as_f64().unwrap());
}

#[test]
fn reports_are_deterministic_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), 11, 0.1);
    let args = |workers: &str| {
        vec![
            "run".to_string(),
            "--bundle".into(),
            bundle.to_str().unwrap().into(),
            "--bits".into(),
            "3".into(),
            "--workers".into(),
            workers.into(),
        ]
    };
    // Wall times and the worker-count echo are the only fields allowed to
    // differ; every computed number must be bit-identical.
    let strip_times = |mut v: Value| {
        v["layers"][0]["wall_time_ms"] = Value::Null;
        v["config"]["workers"] = Value::Null;
        v
    };
    let a = strip_times(report_json(&run_ok(
        &args("1").iter().map(String::as_str).collect::<Vec<_>>(),
    )));
    let b = strip_times(report_json(&run_ok(
        &args("1").iter().map(String::as_str).collect::<Vec<_>>(),
    )));
    let c = strip_times(report_json(&run_ok(
        &args("4").iter().map(String::as_str).collect::<Vec<_>>(),
    )));
    assert_eq!(a, b, "same flags must reproduce the same report");
    assert_eq!(a, c, "worker count must not change any reported number");
}

#[test]
fn compare_covers_all_methods_and_collapses_without_fp_flow() {
    let dir = tempfile::tempdir().unwrap();
    // noise 0 drops the FP-flow tensor entirely; the loader aliases it to
    // the quant input, so the input-aware methods must reduce to the plain
    // ones and both error metrics must coincide.
    let bundle = gen_bundle(dir.path(), 3, 0.0);
    let out = run_ok(&[
        "compare",
        "--bundle",
        bundle.to_str().unwrap(),
        "--bits",
        "3",
        "--group-size",
        "4",
    ]);
    let report = report_json(&out);
    let methods = &report["layers"][0]["methods"];
    for name in ["gptq", "gptaq", "gptq-cae", "gptaq-cae"] {
        assert!(methods.get(name).is_some(), "missing method {name}");
        let m = &methods[name];
        assert_eq!(m["sym_err"], m["asym_err"], "{name}: flows coincide");
    }
    assert_eq!(methods["gptq"]["sym_err"], methods["gptaq"]["sym_err"]);
    assert_eq!(
        methods["gptq-cae"]["sym_err"],
        methods["gptaq-cae"]["sym_err"]
    );
    assert!(report["layers"][0]["rtn"]["sym_err"].as_f64().unwrap() >= 0.0);
}

#[test]
fn fp_flow_tensor_changes_the_asymmetric_metric() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), 5, 0.2);
    let out = run_ok(&[
        "compare",
        "--bundle",
        bundle.to_str().unwrap(),
        "--bits",
        "3",
    ]);
    let methods = &report_json(&out)["layers"][0]["methods"];
    let m = &methods["gptq"];
    assert_ne!(
        m["sym_err"], m["asym_err"],
        "diverged flows must split the metrics"
    );
}

#[test]
fn written_report_matches_stdout_report() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), 19, 0.05);
    let stdout = run_ok(&["run", "--bundle", bundle.to_str().unwrap()]).stdout;
    let path = dir.path().join("report.json");
    run_ok(&[
        "run",
        "--bundle",
        bundle.to_str().unwrap(),
        "--output",
        path.to_str().unwrap(),
    ]);
    let written = std::fs::read(&path).unwrap();
    let a: Value = serde_json::from_slice(&stdout).unwrap();
    let mut b: Value = serde_json::from_slice(&written).unwrap();
    // Wall times are the only nondeterministic fields.
    b["layers"][0]["wall_time_ms"] = a["layers"][0]["wall_time_ms"].clone();
    assert_eq!(a, b);
}

#[test]
fn corrupt_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), 2, 0.0);
    let mut bytes = std::fs::read(&bundle).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&bundle, &bytes).unwrap();
    let stderr = run_err(&["run", "--bundle", bundle.to_str().unwrap()]);
    assert!(stderr.contains("bad magic"), "stderr was: {stderr}");
}

#[test]
fn truncated_bundle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_bundle(dir.path(), 2, 0.0);
    let bytes = std::fs::read(&bundle).unwrap();
    // Chop inside the tensor payload, then inside the manifest.
    std::fs::write(&bundle, &bytes[..bytes.len() - 5]).unwrap();
    let stderr = run_err(&["run", "--bundle", bundle.to_str().unwrap()]);
    assert!(stderr.contains("truncated"), "stderr was: {stderr}");
    std::fs::write(&bundle, &bytes[..7]).unwrap();
    let stderr = run_err(&["run", "--bundle", bundle.to_str().unwrap()]);
    assert!(stderr.contains("truncated"), "stderr was: {stderr}");
}

#[test]
fn missing_bundle_path_fails_cleanly() {
    let stderr = run_err(&["run", "--bundle", "/nonexistent/nope.qbnd"]);
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
}

#[test]
fn oracle_check_passes_and_reports_agreement() {
    let out = run_ok(&[
        "oracle-check",
        "--seed",
        "42",
        "--m",
        "4",
        "--n",
        "8",
        "--k",
        "32",
        "--bits",
        "3",
        "--group-size",
        "4",
    ]);
    let report = report_json(&out);
    assert_eq!(report["passed"], true);
    assert!(report["max_rel_diff"].as_f64().unwrap() <= 1e-6);
    for name in ["gptq", "gptaq", "gptq-cae", "gptaq-cae"] {
        assert!(report["methods"][name]["max_rel_diff"].is_f64());
    }
}

#[test]
fn oracle_check_rejects_oversized_instances() {
    let stderr = run_err(&["oracle-check", "--n", "65"]);
    assert!(stderr.contains("n <= 64"), "stderr was: {stderr}");
}
