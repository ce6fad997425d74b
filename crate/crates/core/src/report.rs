//! Per-task run report.

use std::path::Path;

use serde::Serialize;

use crate::allocation::AllocationPlan;
use crate::cloud::HistoryEntry;
use crate::engine::RNG_ID;
use crate::scheduler::TaskStatus;
use crate::time::Millis;
use crate::trace::round_sig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub x: Vec<u64>,
    pub t_logical_ms: u64,
    pub t_device_ms: u64,
    pub t_total_ms: u64,
    /// Bundles and computing phones each grade was planned against.
    pub bundles: Vec<u64>,
    pub phones: Vec<u64>,
}

impl PlanReport {
    pub fn new(plan: &AllocationPlan, bundles: Vec<u64>, phones: Vec<u64>) -> Self {
        Self {
            x: plan.x.clone(),
            t_logical_ms: plan.t_logical.0,
            t_device_ms: plan.t_device.0,
            t_total_ms: plan.t_total.0,
            bundles,
            phones,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradeRoundTiming {
    pub grade_id: String,
    /// Latest logical-simulation finish, relative to the round start.
    pub logical_end_ms: u64,
    /// Latest phone finish, relative to the round start.
    pub phone_end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub start_ms: u64,
    pub compute_end_ms: u64,
    /// When the round's last emission reached its shelf.
    pub emission_end_ms: Option<u64>,
    pub end_ms: Option<u64>,
    pub span_ms: Option<u64>,
    pub emitted: u64,
    /// Global model version the round started from.
    pub start_version: u64,
    pub grades: Vec<GradeRoundTiming>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MessageCounts {
    pub emitted: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Left on the shelf when the run ended.
    pub residual: u64,
    pub received: u64,
    pub corrupt: u64,
    pub rejected: u64,
    pub shortfall: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationRecord {
    pub version: u64,
    pub t_ms: u64,
    pub messages: u64,
    pub samples: u64,
    pub train_acc: Option<f64>,
    pub loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub flush: bool,
}

impl From<&HistoryEntry> for AggregationRecord {
    fn from(h: &HistoryEntry) -> Self {
        Self {
            version: h.version,
            t_ms: h.t.0,
            messages: h.messages,
            samples: h.samples,
            train_acc: h.train_acc.map(round_sig),
            loss: h.loss.map(round_sig),
            test_acc: h.test_acc.map(round_sig),
            flush: h.flush,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceFiles {
    pub traffic: String,
    pub metrics: String,
    pub aggregation: String,
}

impl Default for TraceFiles {
    fn default() -> Self {
        Self { traffic: "traffic.csv".into(), metrics: "metrics.csv".into(), aggregation: "aggregation.csv".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineReport {
    /// Events processed by the shared engine.
    pub events: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task_id: String,
    pub status: TaskStatus,
    pub failure: Option<String>,
    pub truncated: bool,
    pub seed: u64,
    pub rng: String,
    pub plan: Option<PlanReport>,
    pub start_ms: Option<u64>,
    pub end_ms: Option<u64>,
    pub rounds_completed: u32,
    pub rounds: Vec<RoundReport>,
    pub counts: MessageCounts,
    pub aggregations: Vec<AggregationRecord>,
    pub final_version: u64,
    pub final_test_acc: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub final_loss: Option<f64>,
    pub benchmark_samples: u64,
    pub traces: TraceFiles,
    pub engine: EngineReport,
    /// Output directory taken from the environment, when it overrode `--out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir_override: Option<String>,
}

impl TaskReport {
    pub fn empty(task_id: &str, seed: u64) -> Self {
        Self {
            task_id: task_id.into(),
            status: TaskStatus::Queued,
            failure: None,
            truncated: false,
            seed,
            rng: RNG_ID.into(),
            plan: None,
            start_ms: None,
            end_ms: None,
            rounds_completed: 0,
            rounds: Vec::new(),
            counts: MessageCounts::default(),
            aggregations: Vec::new(),
            final_version: 0,
            final_test_acc: None,
            final_train_acc: None,
            final_loss: None,
            benchmark_samples: 0,
            traces: TraceFiles::default(),
            engine: EngineReport { events: 0, end_ms: 0 },
            output_dir_override: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn end(&self) -> Option<Millis> {
        self.end_ms.map(Millis)
    }
}
