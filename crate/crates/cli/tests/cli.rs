use std::path::{Path, PathBuf};
use std::process::Command;

use edgesim::allocation::{brute_force_allocation, plan_for_spec, AllocationInput};
use edgesim::model::parse_task_document;
use edgesim_cli::cli_main;

fn specs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn spec(name: &str) -> String {
    specs().join(name).display().to_string()
}

fn cli(args: &[&str]) -> i32 {
    cli_main(std::iter::once("edgesim").chain(args.iter().copied()))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edgesim"))
}

const BAD_SPEC: &str = r#"{
  "task_id": "bad", "rounds": 1,
  "grades": [ { "grade_id": "High", "k": 1, "f": 4, "m": 2, "alpha_s": 1, "beta_s": 1, "lambda_s": 0, "N": 3, "q": 5 } ],
  "operator_flow": [ { "kind": "custom_sleep" } ]
}"#;

#[test]
fn validate_exit_codes() {
    assert_eq!(cli(&["validate", &spec("quickstart.json")]), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, BAD_SPEC).unwrap();
    assert_eq!(cli(&["validate", bad.to_str().unwrap()]), 1);
    std::fs::write(&bad, "{ \"task_id\": ").unwrap();
    assert_eq!(cli(&["validate", bad.to_str().unwrap()]), 1);
    // Against a pool without the Low grade.
    let pool = dir.path().join("pool.json");
    std::fs::write(&pool, r#"{"grades":[{"grade_id":"High","bundles":100,"phones":10}]}"#).unwrap();
    assert_eq!(cli(&["validate", &spec("quickstart.json"), "--pool", pool.to_str().unwrap()]), 1);
    assert_eq!(cli(&["validate", "/nonexistent/spec.json"]), 2);
    assert_eq!(cli(&["frobnicate"]), 1);
}

#[test]
fn allocate_matches_library() {
    let out = bin().args(["allocate", &spec("two_grade.json")]).output().unwrap();
    assert!(out.status.success());
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let doc = parse_task_document(&std::fs::read_to_string(spec("two_grade.json")).unwrap()).unwrap();
    let lib = plan_for_spec(&doc).unwrap();
    assert_eq!(printed, serde_json::to_value(&lib).unwrap());
    assert_eq!(lib, brute_force_allocation(&AllocationInput::from_spec(&doc)).unwrap());
    assert_eq!(printed["x"], serde_json::json!([80, 48]));
    assert_eq!(printed["t_total_ms"], 960_000);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(cli(&["run", &spec("quickstart.json"), "--out", out.to_str().unwrap(), "--seed", "21"]), 0);
    }
    for f in ["traffic.csv", "metrics.csv", "aggregation.csv", "report.json", "spec.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, y, "{f} differs");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 21);
    assert_eq!(report["traces"]["traffic"], "traffic.csv");
    let header = std::fs::read_to_string(a.join("traffic.csv")).unwrap();
    assert!(header.starts_with("# edgesim trace v1 seed=21 rng="));
    assert_eq!(cli(&["report", a.to_str().unwrap()]), 0);
}

#[test]
fn report_flags_tampered_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(cli(&["run", &spec("quickstart.json"), "--out", out.to_str().unwrap()]), 0);
    let path = out.join("report.json");
    let mut report: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    report["counts"]["delivered"] = serde_json::json!(1);
    std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    assert_eq!(cli(&["report", out.to_str().unwrap()]), 1);
}

#[test]
fn report_measures_curve_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve");
    let o = bin().args(["run", &spec("curve.json"), "--out", out.to_str().unwrap()]).output().unwrap();
    assert!(o.status.success());
    let o = bin().args(["report", out.to_str().unwrap()]).output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let line = text.lines().find(|l| l.contains("curve fidelity, round 1")).expect("fidelity line");
    let r: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(r >= 0.99, "{line}");
}

#[test]
fn environment_overrides_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let ignored = dir.path().join("from-flag");
    let o = bin()
        .env("EDGESIM_OUT_DIR", &target)
        .args(["run", &spec("quickstart.json"), "--out", ignored.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!ignored.exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(target.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["output_dir_override"], target.display().to_string());
}

#[test]
fn batch_writes_one_directory_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("batch");
    let code = cli(&[
        "run-batch",
        &spec("quickstart.json"),
        &spec("curve.json"),
        "--pool",
        &spec("pool.json"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    for t in ["quickstart", "curve"] {
        assert!(out.join(t).join("report.json").is_file());
        assert_eq!(cli(&["report", out.join(t).to_str().unwrap()]), 0);
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("batch.json")).unwrap()).unwrap();
    assert_eq!(summary["pool_restored"], true);
    assert_eq!(summary["invariant_violations"], 0);
    // Higher priority goes first.
    assert_eq!(summary["admissions"], serde_json::json!(["curve", "quickstart"]));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    assert_eq!(cli(&["run", &spec("quickstart.json"), "--out", blocker.join("sub").to_str().unwrap()]), 2);
    assert_eq!(cli(&["report", dir.path().join("missing").to_str().unwrap()]), 2);
}

#[test]
fn generated_data_feeds_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("clicks.csv");
    assert_eq!(cli(&["gen-data", "--rows", "600", "--dim", "64", "--out", csv.to_str().unwrap(), "--seed", "4"]), 0);
    assert!(dir.path().join("clicks.schema.json").is_file());
    let task = dir.path().join("task.json");
    std::fs::write(
        &task,
        r#"{
  "task_id": "csv", "rounds": 2, "seed": 2,
  "grades": [ { "grade_id": "High", "k": 1, "f": 10, "m": 2, "alpha_s": 5, "beta_s": 5, "lambda_s": 1, "N": 30, "q": 0 } ],
  "operator_flow": [ { "kind": "train_lr", "dataset_ref": "csv:clicks.csv?schema=clicks.schema.json&partition=by_device", "params": { "epochs": 3, "learning_rate": 1.0 } } ],
  "aggregation_trigger": { "type": "sample_threshold", "samples": 100 }
}"#,
    )
    .unwrap();
    assert_eq!(cli(&["validate", task.to_str().unwrap()]), 0);
    let out = dir.path().join("out");
    assert_eq!(cli(&["run", task.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "completed");
    assert!(report["final_test_acc"].is_number());
    assert_eq!(cli(&["gen-data", "--rows", "0", "--dim", "8", "--out", csv.to_str().unwrap()]), 1);
}
