//! Command-line front end. [`cli_main`] returns the process exit code:
//! 0 on success, 1 when an input fails validation, 2 on a runtime error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use edgesim::allocation::plan_for_spec;
use edgesim::deviceflow::{DispatchStrategySpec, TimeBase};
use edgesim::engine::rng_stream;
use edgesim::model::{
    intrinsic_violations, parse_task_document, parse_task_spec, serialize_task_spec, validate_task_spec, TaskSpec,
};
use edgesim::platform::{run_batch, write_task_outputs, RunOptions, TaskOutcome};
use edgesim::scheduler::ResourcePool;
use edgesim::stats::curve_fidelity;
use edgesim::trace::{peak_receive_rate, read_traffic_csv, EventKind, TraceRecord};
use edgesim::workload::data::{generate_raw_ctr, write_ctr_csv, CsvSchema, SyntheticCtrConfig};
use edgesim::Millis;
use serde_json::{json, Value};

/// Overrides `--out` for `run` and `run-batch`; the override is recorded in
/// each report.
pub const OUT_DIR_ENV: &str = "EDGESIM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "edgesim", version, about = "Deterministic device-cloud collaborative computing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a task file against its own resources or a pool file.
    Validate {
        spec: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Print the allocation plan a task would run with.
    Allocate { spec: PathBuf },
    /// Run one task on the resources it declares.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the seed in the task file.
        #[arg(long)]
        seed: Option<u64>,
        /// Virtual-time limit in seconds.
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Run several tasks over a shared pool.
    RunBatch {
        #[arg(required = true)]
        specs: Vec<PathBuf>,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Summarize a run directory.
    Report { dir: PathBuf },
    /// Write a synthetic click log as CSV plus its schema file.
    GenData {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        rows_per_device: usize,
        #[arg(long, default_value_t = 8)]
        fields: usize,
        #[arg(long, default_value_t = 64)]
        cardinality: u32,
    },
}

/// Exit status with a message for standard error.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Validate { spec, pool } => validate(&spec, pool.as_deref()),
        Command::Allocate { spec } => allocate(&spec),
        Command::Run { spec, out, seed, horizon } => run(&spec, out, seed, horizon),
        Command::RunBatch { specs, pool, out, horizon } => batch(&specs, &pool, out, horizon),
        Command::Report { dir } => report(&dir),
        Command::GenData { rows, dim, out, seed, rows_per_device, fields, cardinality } => {
            gen_data(rows, dim, &out, seed, rows_per_device, fields, cardinality)
        }
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn base_dir(spec: &Path) -> PathBuf {
    spec.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn load_spec(path: &Path) -> Result<TaskSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    parse_task_spec(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load_pool(path: &Path) -> Result<ResourcePool, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    ResourcePool::from_json(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn horizon(secs: Option<f64>) -> Result<Option<Millis>, Failure> {
    secs.map(|s| Millis::from_secs_f64(s).ok_or_else(|| Failure::Invalid(format!("horizon {s} is not a valid duration"))))
        .transpose()
}

/// `--out` unless the environment overrides it; the second value is the
/// override to record.
fn out_dir(flag: Option<PathBuf>) -> Result<(PathBuf, Option<String>), Failure> {
    match std::env::var(OUT_DIR_ENV) {
        Ok(v) if !v.is_empty() => Ok((PathBuf::from(&v), Some(v))),
        _ => flag.map(|p| (p, None)).ok_or_else(|| Failure::Invalid(format!("--out is required unless {OUT_DIR_ENV} is set"))),
    }
}

fn validate(path: &Path, pool: Option<&Path>) -> Outcome {
    let spec = load_spec(path)?;
    let pool = match pool {
        Some(p) => load_pool(p)?,
        None => ResourcePool::for_task(&spec),
    };
    let violations = validate_task_spec(&spec, &pool, &base_dir(path));
    if violations.is_empty() {
        println!("{}: ok", spec.task_id);
        return Ok(());
    }
    for v in &violations {
        println!("{}: {}", spec.task_id, v.0);
    }
    Err(Failure::Invalid(format!("{} violation(s)", violations.len())))
}

fn allocate(path: &Path) -> Outcome {
    // Planning needs only the grade parameters, so a document that could not
    // run (say, more benchmarking devices than phones) still gets a plan.
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let spec = parse_task_document(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    for v in intrinsic_violations(&spec) {
        eprintln!("warning: {}: {}", spec.task_id, v.0);
    }
    let plan = plan_for_spec(&spec).map_err(|e| Failure::Invalid(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&plan).map_err(runtime)?);
    Ok(())
}

fn write_outputs(dir: &Path, task: &TaskOutcome, records: &[TraceRecord], spec: Option<&TaskSpec>) -> Outcome {
    write_task_outputs(dir, task, records).map_err(runtime)?;
    if let Some(spec) = spec {
        std::fs::write(dir.join("spec.json"), serialize_task_spec(spec) + "\n").map_err(runtime)?;
    }
    Ok(())
}

fn summary_line(t: &TaskOutcome) -> String {
    let r = &t.report;
    let c = &r.counts;
    let acc = r.final_test_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
    format!(
        "{}: {}{} rounds={} emitted={} delivered={} dropped={} residual={} aggregations={} test_acc={acc}",
        r.task_id,
        format!("{:?}", r.status).to_lowercase(),
        if r.truncated { " (truncated)" } else { "" },
        r.rounds_completed,
        c.emitted,
        c.delivered,
        c.dropped,
        c.residual,
        r.aggregations.len(),
    )
}

fn task_failed(t: &TaskOutcome) -> Option<Failure> {
    let msg = t.report.failure.clone().unwrap_or_default();
    if t.rejected {
        Some(Failure::Invalid(format!("{}: {msg}", t.report.task_id)))
    } else if t.report.failure.is_some() {
        Some(Failure::Runtime(format!("{}: {msg}", t.report.task_id)))
    } else {
        None
    }
}

fn run(path: &Path, out: Option<PathBuf>, seed: Option<u64>, horizon_s: Option<f64>) -> Outcome {
    let mut spec = load_spec(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (dir, override_dir) = out_dir(out)?;
    let opts = RunOptions { horizon: horizon(horizon_s)?, base_dir: base_dir(path), ..RunOptions::default() };
    let pool = ResourcePool::for_task(&spec);
    let outcome = run_batch(vec![spec.clone()], pool, &opts).map_err(runtime)?;
    let mut task = outcome.tasks.into_iter().next().expect("one task submitted");
    task.report.output_dir_override = override_dir;
    write_outputs(&dir, &task, &outcome.trace.for_task(&spec.task_id), Some(&spec))?;
    println!("{}", summary_line(&task));
    println!("outputs in {}", dir.display());
    task_failed(&task).map_or(Ok(()), Err)
}

fn batch(paths: &[PathBuf], pool_path: &Path, out: Option<PathBuf>, horizon_s: Option<f64>) -> Outcome {
    let specs = paths.iter().map(|p| load_spec(p)).collect::<Result<Vec<_>, _>>()?;
    let pool = load_pool(pool_path)?;
    let (dir, override_dir) = out_dir(out)?;
    // Dataset paths resolve against the first task file's directory.
    let base = paths.first().map_or_else(|| PathBuf::from("."), |p| base_dir(p));
    let opts = RunOptions { horizon: horizon(horizon_s)?, base_dir: base, ..RunOptions::default() };
    let outcome = run_batch(specs.clone(), pool.clone(), &opts).map_err(runtime)?;
    let mut first_failure = None;
    let mut tasks = Vec::new();
    for (mut task, spec) in outcome.tasks.into_iter().zip(&specs) {
        task.report.output_dir_override = override_dir.clone();
        let sub = dir.join(&task.report.task_id);
        write_outputs(&sub, &task, &outcome.trace.for_task(&task.report.task_id), Some(spec))?;
        println!("{}", summary_line(&task));
        tasks.push(json!({
            "task_id": task.report.task_id,
            "status": task.report.status,
            "truncated": task.report.truncated,
            "start_ms": task.report.start_ms,
            "end_ms": task.report.end_ms,
            "failure": task.report.failure,
        }));
        if first_failure.is_none() {
            first_failure = task_failed(&task);
        }
    }
    let summary = json!({
        "tasks": tasks,
        "admissions": outcome.admissions,
        "events": outcome.events,
        "end_ms": outcome.end.as_u64(),
        "invariant_violations": outcome.invariant_violations,
        "pool_restored": outcome.pool == pool,
        "output_dir_override": override_dir,
    });
    let path = dir.join("batch.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).map_err(runtime)? + "\n").map_err(runtime)?;
    println!("outputs in {}", dir.display());
    first_failure.map_or(Ok(()), Err)
}

fn report(dir: &Path) -> Outcome {
    let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let rep: Value = serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("report.json: {e}")))?;
    let traffic = rep["traces"]["traffic"].as_str().unwrap_or("traffic.csv");
    let records = read_traffic_csv(&dir.join(traffic)).map_err(|e| Failure::Invalid(e.to_string()))?;
    let task = rep["task_id"].as_str().unwrap_or("?");
    println!("task {task}: status {}", rep["status"].as_str().unwrap_or("?"));

    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &records {
        *totals.entry(r.event.as_str()).or_default() += r.count;
    }
    for (event, n) in &totals {
        println!("  {event:<9} {n}");
    }
    let total = |k: EventKind| totals.get(k.as_str()).copied().unwrap_or(0);
    let counts = &rep["counts"];
    let field = |k: &str| counts[k].as_u64().unwrap_or(0);
    let recomputed = [
        ("emitted", total(EventKind::Emit)),
        ("delivered", total(EventKind::Dispatch)),
        ("dropped", total(EventKind::Drop)),
        ("rejected", total(EventKind::Reject)),
        ("received", total(EventKind::Receive).saturating_sub(field("corrupt"))),
        (
            "residual",
            total(EventKind::Emit).saturating_sub(total(EventKind::Dispatch) + total(EventKind::Drop) + total(EventKind::Reject)),
        ),
    ];
    let mismatches: Vec<String> = recomputed
        .iter()
        .filter(|(k, v)| field(k) != *v)
        .map(|(k, v)| format!("{k}: report {} vs trace {v}", field(k)))
        .collect();
    for (t, peak) in peak_receive_rate(&records) {
        println!("  peak receive rate for {t}: {peak}/s");
    }

    if let Ok(text) = std::fs::read_to_string(dir.join("spec.json")) {
        let spec = parse_task_spec(&text).map_err(|e| Failure::Invalid(format!("spec.json: {e}")))?;
        if let DispatchStrategySpec::TimeInterval { rate, domain, start, length, time_base, .. } = &spec.dispatch_strategy {
            let dispatches: Vec<(Millis, u64)> =
                records.iter().filter(|r| r.event == EventKind::Dispatch).map(|r| (r.t, r.count)).collect();
            let mut anchors: BTreeMap<u32, Millis> = BTreeMap::new();
            if *time_base == TimeBase::Absolute {
                anchors.insert(0, Millis::ZERO);
            } else {
                for r in records.iter().filter(|r| r.event == EventKind::Shelve) {
                    let a = anchors.entry(r.round).or_insert(r.t);
                    *a = (*a).max(r.t);
                }
            }
            for (round, anchor) in anchors {
                match curve_fidelity(rate, *domain, anchor + *start, *length, Millis(1000), &dispatches) {
                    Ok(r) => println!("  curve fidelity, round {round}: {r:.6}"),
                    Err(e) => println!("  curve fidelity, round {round}: {e}"),
                }
            }
        }
    }
    if mismatches.is_empty() {
        println!("  counts consistent with trace");
        Ok(())
    } else {
        Err(Failure::Invalid(format!("report disagrees with trace: {}", mismatches.join(", "))))
    }
}

fn gen_data(rows: usize, dim: usize, out: &Path, seed: u64, rows_per_device: usize, fields: usize, cardinality: u32) -> Outcome {
    if rows == 0 || dim == 0 || fields == 0 || cardinality == 0 {
        return Err(Failure::Invalid("rows, dim, fields and cardinality must be positive".into()));
    }
    let cfg = SyntheticCtrConfig { fields, cardinality, ..SyntheticCtrConfig::new(rows, dim) };
    let (raw, _) = generate_raw_ctr(&cfg, &mut rng_stream(seed, "gen-data", 0));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    write_ctr_csv(&raw, rows_per_device, out).map_err(runtime)?;
    let schema = CsvSchema {
        label_column: "click".into(),
        device_id_column: Some("device_id".into()),
        categorical_columns: (0..fields).map(edgesim::workload::data::field_name).collect(),
        hash_dim: dim,
    };
    let schema_path = out.with_extension("schema.json");
    std::fs::write(&schema_path, serde_json::to_string_pretty(&schema).map_err(runtime)? + "\n").map_err(runtime)?;
    println!("wrote {rows} rows to {} and schema to {}", out.display(), schema_path.display());
    Ok(())
}
