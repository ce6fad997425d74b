//! Task specification: domain types, the JSON task file, and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::DatasetRef;
use crate::cloud::AggregationTrigger;
use crate::deviceflow::DispatchStrategySpec;
use crate::emulation::ResponseDelayModel;
use crate::scheduler::ResourcePool;
use crate::time::Millis;

pub const DEFAULT_EPOCHS: u64 = 10;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Resource and timing parameters of one device grade.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GradeSpec {
    pub grade_id: String,
    /// Bundles needed to simulate one device logically.
    pub k: u64,
    /// Bundles available to the grade for logical simulation.
    pub f: u64,
    /// Computing phones available to the grade.
    pub m: u64,
    /// Per-device time in logical simulation.
    pub alpha: Millis,
    /// Per-device time on a phone.
    pub beta: Millis,
    /// One-time framework startup on a phone.
    pub lambda: Millis,
}

impl GradeSpec {
    pub fn logical_slots(&self) -> u64 {
        self.f / self.k.max(1)
    }
}

/// Devices to simulate for one grade, `q` of them benchmarking phones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Demand {
    pub n: u64,
    pub q: u64,
}

impl Demand {
    /// Devices that do computation (excludes benchmarking phones).
    pub fn computing(&self) -> u64 {
        self.n.saturating_sub(self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    TrainLr,
    PredictLr,
    CustomSleep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorStep {
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_ref: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Value>,
}

impl OperatorStep {
    fn num(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(Value::as_f64)
    }

    pub fn epochs(&self) -> u64 {
        self.num("epochs").map_or(DEFAULT_EPOCHS, |e| e as u64)
    }

    pub fn learning_rate(&self) -> f64 {
        self.num("learning_rate").unwrap_or(DEFAULT_LEARNING_RATE)
    }

    pub fn sleep(&self) -> Millis {
        self.num("duration_s").and_then(Millis::from_secs_f64).unwrap_or(Millis::ZERO)
    }

    fn violations(&self, idx: usize) -> Vec<String> {
        let mut out = Vec::new();
        let allowed: &[&str] = match self.kind {
            StepKind::TrainLr => &["epochs", "learning_rate"],
            StepKind::PredictLr => &[],
            StepKind::CustomSleep => &["duration_s"],
        };
        for (k, v) in &self.params {
            if !allowed.contains(&k.as_str()) {
                out.push(format!("step {idx}: unknown parameter '{k}'"));
            } else if v.as_f64().is_none() {
                out.push(format!("step {idx}: parameter '{k}' must be a number"));
            }
        }
        match self.kind {
            StepKind::TrainLr => {
                if self.dataset_ref.is_none() {
                    out.push(format!("step {idx}: train_lr requires dataset_ref"));
                }
                if let Some(e) = self.num("epochs") {
                    if e < 1.0 || e.fract() != 0.0 {
                        out.push(format!("step {idx}: epochs must be a positive integer"));
                    }
                }
                if let Some(lr) = self.num("learning_rate") {
                    if !(lr >= 0.0 && lr.is_finite()) {
                        out.push(format!("step {idx}: learning_rate must be nonnegative"));
                    }
                }
            }
            StepKind::PredictLr => {
                if self.dataset_ref.is_none() {
                    out.push(format!("step {idx}: predict_lr requires dataset_ref"));
                }
            }
            StepKind::CustomSleep => {
                if let Some(d) = self.num("duration_s") {
                    if Millis::from_secs_f64(d).is_none() {
                        out.push(format!("step {idx}: duration_s must be a nonnegative number"));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OperatorFlow {
    pub steps: Vec<OperatorStep>,
}

impl OperatorFlow {
    pub fn dataset_refs(&self) -> BTreeSet<&str> {
        self.steps.iter().filter_map(|s| s.dataset_ref.as_deref()).collect()
    }

    /// Dataset of the first training step; defines the model dimension and test set.
    pub fn primary_dataset(&self) -> Option<&str> {
        self.steps
            .iter()
            .find(|s| s.kind == StepKind::TrainLr)
            .and_then(|s| s.dataset_ref.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub priority: i64,
    pub rounds: u32,
    pub seed: u64,
    pub grades: Vec<GradeSpec>,
    /// Aligned with `grades`.
    pub demand: Vec<Demand>,
    pub operator_flow: OperatorFlow,
    pub dispatch_strategy: DispatchStrategySpec,
    pub aggregation_trigger: AggregationTrigger,
    pub response_delay: ResponseDelayModel,
    /// Explicit logical-simulation counts per grade id.
    pub allocation_override: Option<BTreeMap<String, u64>>,
}

impl TaskSpec {
    pub fn grade_demands(&self) -> impl Iterator<Item = (&GradeSpec, &Demand)> {
        self.grades.iter().zip(&self.demand)
    }

    pub fn computing_devices(&self) -> u64 {
        self.demand.iter().map(Demand::computing).sum()
    }

    /// Override as a vector aligned with `grades` (missing grades get 0).
    pub fn override_vector(&self) -> Option<Vec<u64>> {
        self.allocation_override
            .as_ref()
            .map(|o| self.grades.iter().map(|g| o.get(&g.grade_id).copied().unwrap_or(0)).collect())
    }
}

// ---- wire format ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradeEntry {
    grade_id: String,
    k: u64,
    f: u64,
    m: u64,
    #[serde(with = "crate::time::secs")]
    alpha_s: Millis,
    #[serde(with = "crate::time::secs")]
    beta_s: Millis,
    #[serde(with = "crate::time::secs")]
    lambda_s: Millis,
    #[serde(rename = "N")]
    n: u64,
    q: u64,
}

fn default_trigger() -> AggregationTrigger {
    AggregationTrigger::SampleThreshold { samples: 1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    task_id: String,
    #[serde(default)]
    priority: i64,
    rounds: u32,
    #[serde(default)]
    seed: u64,
    grades: Vec<GradeEntry>,
    operator_flow: Vec<OperatorStep>,
    #[serde(default)]
    dispatch_strategy: DispatchStrategySpec,
    #[serde(default = "default_trigger")]
    aggregation_trigger: AggregationTrigger,
    #[serde(default)]
    response_delay: ResponseDelayModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    allocation_override: Option<BTreeMap<String, u64>>,
}

impl From<TaskFile> for TaskSpec {
    fn from(f: TaskFile) -> Self {
        let (grades, demand) = f
            .grades
            .into_iter()
            .map(|g| {
                (
                    GradeSpec { grade_id: g.grade_id, k: g.k, f: g.f, m: g.m, alpha: g.alpha_s, beta: g.beta_s, lambda: g.lambda_s },
                    Demand { n: g.n, q: g.q },
                )
            })
            .unzip();
        TaskSpec {
            task_id: f.task_id,
            priority: f.priority,
            rounds: f.rounds,
            seed: f.seed,
            grades,
            demand,
            operator_flow: OperatorFlow { steps: f.operator_flow },
            dispatch_strategy: f.dispatch_strategy,
            aggregation_trigger: f.aggregation_trigger,
            response_delay: f.response_delay,
            allocation_override: f.allocation_override,
        }
    }
}

impl From<&TaskSpec> for TaskFile {
    fn from(s: &TaskSpec) -> Self {
        TaskFile {
            task_id: s.task_id.clone(),
            priority: s.priority,
            rounds: s.rounds,
            seed: s.seed,
            grades: s
                .grade_demands()
                .map(|(g, d)| GradeEntry {
                    grade_id: g.grade_id.clone(),
                    k: g.k,
                    f: g.f,
                    m: g.m,
                    alpha_s: g.alpha,
                    beta_s: g.beta,
                    lambda_s: g.lambda,
                    n: d.n,
                    q: d.q,
                })
                .collect(),
            operator_flow: s.operator_flow.steps.clone(),
            dispatch_strategy: s.dispatch_strategy.clone(),
            aggregation_trigger: s.aggregation_trigger.clone(),
            response_delay: s.response_delay.clone(),
            allocation_override: s.allocation_override.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown field: {0}")]
    UnknownField(String),
    #[error("missing required field: {0}")]
    MissingField(String),
    #[error("invalid value: {0}")]
    Schema(String),
    #[error("invalid task: {}", .0.iter().map(|v| v.0.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

fn classify(e: serde_json::Error) -> SpecError {
    use serde_json::error::Category;
    let msg = e.to_string();
    match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => SpecError::Syntax { line: e.line(), column: e.column(), message: msg },
        Category::Data if msg.starts_with("unknown field") || msg.starts_with("unknown variant") => SpecError::UnknownField(msg),
        Category::Data if msg.starts_with("missing field") => SpecError::MissingField(msg),
        Category::Data => SpecError::Schema(msg),
    }
}

/// Parses a task file and applies defaults without checking invariants.
pub fn parse_task_document(text: &str) -> Result<TaskSpec, SpecError> {
    let file: TaskFile = serde_json::from_str(text).map_err(classify)?;
    Ok(TaskSpec::from(file))
}

/// Parses a task file, applies defaults and checks the spec's own invariants.
pub fn parse_task_spec(text: &str) -> Result<TaskSpec, SpecError> {
    let spec = parse_task_document(text)?;
    let v = intrinsic_violations(&spec);
    if !v.is_empty() {
        return Err(SpecError::Invalid(v));
    }
    Ok(spec)
}

pub fn serialize_task_spec(spec: &TaskSpec) -> String {
    serde_json::to_string_pretty(&TaskFile::from(spec)).expect("task spec serializes")
}

/// Invariants that do not depend on a pool or the filesystem.
pub fn intrinsic_violations(spec: &TaskSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |s: String| out.push(Violation(s));
    if spec.task_id.trim().is_empty() {
        push("task_id must be nonempty".into());
    }
    if spec.rounds == 0 {
        push("rounds must be at least 1".into());
    }
    if spec.grades.is_empty() {
        push("at least one grade is required".into());
    }
    if spec.grades.len() != spec.demand.len() {
        push("every grade needs a demand entry".into());
    }
    let mut ids = BTreeSet::new();
    for (g, d) in spec.grade_demands() {
        let id = &g.grade_id;
        if !ids.insert(id.as_str()) {
            push(format!("grade {id} declared twice"));
        }
        if g.k == 0 {
            push(format!("grade {id}: k must be at least 1"));
        }
        if g.alpha == Millis::ZERO {
            push(format!("grade {id}: alpha must be positive"));
        }
        if g.beta == Millis::ZERO {
            push(format!("grade {id}: beta must be positive"));
        }
        if d.q > d.n {
            push(format!("grade {id}: benchmarking exceeds demand"));
        }
        if d.q > g.m {
            push(format!("grade {id}: benchmarking exceeds phones"));
        }
        if d.computing() > 0 && g.f < g.k.max(1) && g.m == 0 {
            push(format!("grade {id} unhostable"));
        }
    }
    if spec.operator_flow.steps.is_empty() {
        push("operator_flow needs at least one step".into());
    }
    for (i, s) in spec.operator_flow.steps.iter().enumerate() {
        for v in s.violations(i) {
            push(v);
        }
    }
    for v in spec.dispatch_strategy.violations() {
        push(format!("dispatch_strategy: {v}"));
    }
    for v in spec.aggregation_trigger.violations() {
        push(format!("aggregation_trigger: {v}"));
    }
    for v in spec.response_delay.violations() {
        push(format!("response_delay: {v}"));
    }
    if let Some(o) = &spec.allocation_override {
        for (gid, &x) in o {
            match spec.grade_demands().find(|(g, _)| &g.grade_id == gid) {
                None => push(format!("allocation_override names unknown grade {gid}")),
                Some((g, d)) => {
                    if x > d.computing() {
                        push(format!("allocation_override for {gid} exceeds N - q"));
                    } else {
                        if x > 0 && g.f < g.k {
                            push(format!("allocation_override for {gid}: no logical capacity"));
                        }
                        if d.computing() > x && g.m == 0 {
                            push(format!("allocation_override for {gid}: no phone capacity"));
                        }
                    }
                }
            }
        }
    }
    out
}

/// All violations of `spec` against `pool`, resolving dataset references
/// relative to `base_dir`. Empty means valid. Never mutates its inputs.
pub fn validate_task_spec(spec: &TaskSpec, pool: &ResourcePool, base_dir: &Path) -> Vec<Violation> {
    let mut out = intrinsic_violations(spec);
    for (g, d) in spec.grade_demands() {
        match pool.grade(&g.grade_id) {
            None => out.push(Violation(format!("grade {} not in pool", g.grade_id))),
            Some(p) => {
                if p.phones_total < d.q {
                    out.push(Violation(format!("grade {}: pool has too few phones for benchmarking", g.grade_id)));
                }
                let bundles = p.bundles_total.min(g.f);
                let phones = p.phones_total.saturating_sub(d.q).min(g.m);
                if d.computing() > 0 && bundles < g.k && phones == 0 {
                    out.push(Violation(format!("grade {} can never be hosted by the pool", g.grade_id)));
                }
            }
        }
    }
    for r in spec.operator_flow.dataset_refs() {
        if let Err(e) = DatasetRef::parse(r, base_dir).and_then(|d| d.check_resolvable()) {
            out.push(Violation(format!("unresolved dataset '{r}': {e}")));
        }
    }
    out
}
