//! Device-side emulation: bundle slots, phones, operator flows, response
//! delays and benchmark metric traces.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::rng_stream;
use crate::model::{GradeSpec, OperatorFlow, StepKind};
use crate::time::{secs, Millis};
use crate::workload::{evaluate, train_local_lr, ClientDataset, Evaluation, ModelParams, WorkloadError};

#[derive(Debug, Error)]
pub enum EmulationError {
    #[error("grade {0}: devices assigned to logical simulation but no slot fits")]
    NoSlots(String),
    #[error("grade {0}: devices assigned to phones but no phone available")]
    NoPhones(String),
    #[error("dataset '{0}' is not loaded")]
    UnknownDataset(String),
    #[error("dataset '{dataset}' has no data for device {device}")]
    MissingClient { dataset: String, device: u32 },
    #[error("step {step} requires a dataset")]
    NoDataset { step: usize },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// Per-device client data, looked up by dataset reference.
pub trait ClientData {
    fn client(&self, dataset_ref: &str, device_id: u32) -> Result<&ClientDataset<f64>, EmulationError>;
    fn dim(&self, dataset_ref: &str) -> Result<usize, EmulationError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceFinish {
    pub device_id: u32,
    /// Slot index for logical simulation, phone index otherwise.
    pub unit: u32,
    /// Offset from the round start.
    pub finish: Millis,
}

/// Finish times on bundle slots. Device `i` (1-based) completes at
/// `ceil(k·i / f)·α`: `f / k` slots work through devices round-robin, and
/// leftover bundles (when `k` does not divide `f`) are pooled so that the
/// grade keeps its full throughput of `f / k` devices per `α`.
pub fn simulate_round_logical(grade: &GradeSpec, device_ids: &[u32]) -> Result<Vec<DeviceFinish>, EmulationError> {
    if device_ids.is_empty() {
        return Ok(Vec::new());
    }
    let slots = grade.logical_slots();
    if slots == 0 {
        return Err(EmulationError::NoSlots(grade.grade_id.clone()));
    }
    let (k, f, alpha) = (grade.k as u128, grade.f as u128, grade.alpha.0 as u128);
    Ok(device_ids
        .iter()
        .enumerate()
        .map(|(i, &device_id)| {
            let n = i as u128 + 1;
            let finish = (k * n).div_ceil(f) * alpha;
            DeviceFinish { device_id, unit: (i as u64 % slots) as u32, finish: Millis(finish.min(u64::MAX as u128) as u64) }
        })
        .collect())
}

/// Finish times on phones: device `j` runs on phone `j mod m` as that
/// phone's `j / m`-th job. Startup `λ` is paid in the first round only.
pub fn simulate_round_device(grade: &GradeSpec, device_ids: &[u32], first_round: bool) -> Result<Vec<DeviceFinish>, EmulationError> {
    if device_ids.is_empty() {
        return Ok(Vec::new());
    }
    if grade.m == 0 {
        return Err(EmulationError::NoPhones(grade.grade_id.clone()));
    }
    let startup = if first_round { grade.lambda } else { Millis::ZERO };
    Ok(device_ids
        .iter()
        .enumerate()
        .map(|(j, &device_id)| {
            let j = j as u64;
            DeviceFinish { device_id, unit: (j % grade.m) as u32, finish: startup + grade.beta * (j / grade.m + 1) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub kind: StepKind,
    pub nominal: Millis,
    pub wall: Duration,
    pub loss: Option<f64>,
    pub evaluation: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowOutput {
    pub payload: Option<ModelParams<f64>>,
    pub sample_count: u64,
    pub steps: Vec<StepStats>,
}

impl FlowOutput {
    pub fn nominal(&self) -> Millis {
        self.steps.iter().map(|s| s.nominal).sum()
    }
}

pub struct DeviceContext<'a> {
    pub device_id: u32,
    /// Model published by the cloud; `None` before the first aggregation.
    pub global: Option<&'a ModelParams<f64>>,
    pub data: &'a dyn ClientData,
}

/// Runs every step of `flow` for one device. Training starts from the global
/// model (zeros before the first aggregation) and its result is the payload.
pub fn execute_operator_flow(ctx: &DeviceContext<'_>, flow: &OperatorFlow) -> Result<FlowOutput, EmulationError> {
    let mut out = FlowOutput::default();
    let mut current: Option<ModelParams<f64>> = None;
    for (idx, step) in flow.steps.iter().enumerate() {
        let started = Instant::now();
        let mut stats = StepStats { kind: step.kind, nominal: Millis::ZERO, wall: Duration::ZERO, loss: None, evaluation: None };
        match step.kind {
            StepKind::TrainLr => {
                let r = step.dataset_ref.as_deref().ok_or(EmulationError::NoDataset { step: idx })?;
                let client = ctx.data.client(r, ctx.device_id)?;
                let start = match (&current, ctx.global) {
                    (Some(p), _) => p.clone(),
                    (None, Some(g)) => g.clone(),
                    (None, None) => ModelParams::zeros(ctx.data.dim(r)?),
                };
                let trained = train_local_lr(&start, &client.rows, step.epochs() as usize, step.learning_rate())?;
                stats.loss = Some(trained.final_loss());
                out.sample_count = client.rows.len() as u64;
                current = Some(trained.params);
            }
            StepKind::PredictLr => {
                let r = step.dataset_ref.as_deref().ok_or(EmulationError::NoDataset { step: idx })?;
                let client = ctx.data.client(r, ctx.device_id)?;
                let params = match (&current, ctx.global) {
                    (Some(p), _) => p.clone(),
                    (None, Some(g)) => g.clone(),
                    (None, None) => ModelParams::zeros(ctx.data.dim(r)?),
                };
                let ev = evaluate(&params, &client.rows)?;
                stats.loss = Some(ev.loss);
                stats.evaluation = Some(ev);
            }
            StepKind::CustomSleep => stats.nominal = step.sleep(),
        }
        stats.wall = started.elapsed();
        out.steps.push(stats);
    }
    out.payload = current;
    Ok(out)
}

/// Per-device delay between finishing computation and emitting the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResponseDelayModel {
    #[default]
    None,
    Fixed {
        #[serde(rename = "delay_s", with = "secs")]
        delay: Millis,
    },
    /// `|N(0, sigma)|·scale`. With `ctr_linked`, the smallest draws go to the
    /// clients with the highest positive-label share.
    RightTailNormal {
        sigma: f64,
        #[serde(rename = "scale_s")]
        scale: f64,
        #[serde(default)]
        ctr_linked: bool,
    },
}

impl ResponseDelayModel {
    pub fn violations(&self) -> Vec<String> {
        match self {
            ResponseDelayModel::RightTailNormal { sigma, scale, .. } => {
                let mut v = Vec::new();
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    v.push("sigma must be a nonnegative number".into());
                }
                if !(scale.is_finite() && *scale >= 0.0) {
                    v.push("scale_s must be a nonnegative number".into());
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Delays for one round, aligned with `ctr` (one entry per device, in
    /// device order). Draws come from the `(seed, "delay", round)` stream.
    pub fn assign(&self, seed: u64, round: u32, ctr: &[f64]) -> Vec<Millis> {
        match *self {
            ResponseDelayModel::None => vec![Millis::ZERO; ctr.len()],
            ResponseDelayModel::Fixed { delay } => vec![delay; ctr.len()],
            ResponseDelayModel::RightTailNormal { sigma, scale, ctr_linked } => {
                let mut rng = rng_stream(seed, "delay", round as u64);
                let mut draws: Vec<Millis> = if sigma == 0.0 {
                    vec![Millis::ZERO; ctr.len()]
                } else {
                    let normal = Normal::new(0.0, sigma).expect("sigma validated");
                    (0..ctr.len())
                        .map(|_| Millis::from_secs_f64(normal.sample(&mut rng).abs() * scale).unwrap_or(Millis::MAX))
                        .collect()
                };
                if ctr_linked {
                    draws.sort_unstable();
                    let mut order: Vec<usize> = (0..ctr.len()).collect();
                    order.sort_by(|&a, &b| ctr[b].total_cmp(&ctr[a]).then(a.cmp(&b)));
                    let mut out = vec![Millis::ZERO; ctr.len()];
                    for (rank, &i) in order.iter().enumerate() {
                        out[i] = draws[rank];
                    }
                    out
                } else {
                    draws
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub power_mah: f64,
    pub duration_min: f64,
    pub commu_kb: f64,
    pub voltage_mv: f64,
    pub cpu_pct: f64,
    pub mem_kb: f64,
}

impl Stage {
    pub fn duration(&self) -> Millis {
        Millis::from_secs_f64(self.duration_min * 60.0).unwrap_or(Millis::ZERO)
    }

    /// Mean current over the stage, from its charge and duration.
    pub fn current_ua(&self) -> f64 {
        self.power_mah / (self.duration_min / 60.0) * 1000.0
    }
}

pub const STAGE_NAMES: [&str; 5] = ["idle", "launch", "training", "post_training", "closure"];

/// Five-stage power and runtime profile of a benchmarking phone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stages: [Stage; 5],
}

const fn stage(power_mah: f64, duration_min: f64, commu_kb: f64, voltage_mv: f64, cpu_pct: f64, mem_kb: f64) -> Stage {
    Stage { power_mah, duration_min, commu_kb, voltage_mv, cpu_pct, mem_kb }
}

impl StageProfile {
    pub fn high() -> Self {
        Self {
            stages: [
                stage(0.24, 0.25, 0.0, 3900.0, 4.0, 30_000.0),
                stage(0.51, 0.25, 0.0, 3880.0, 22.0, 140_000.0),
                stage(0.18, 0.27, 33.10, 3860.0, 65.0, 230_000.0),
                stage(0.37, 0.25, 0.0, 3870.0, 18.0, 170_000.0),
                stage(0.44, 0.25, 0.0, 3890.0, 8.0, 40_000.0),
            ],
        }
    }

    pub fn low() -> Self {
        Self {
            stages: [
                stage(1.71, 0.25, 0.0, 3820.0, 9.0, 45_000.0),
                stage(1.80, 0.25, 0.0, 3790.0, 38.0, 160_000.0),
                stage(0.66, 0.36, 33.10, 3760.0, 90.0, 250_000.0),
                stage(1.65, 0.25, 0.0, 3780.0, 30.0, 190_000.0),
                stage(1.82, 0.25, 0.0, 3800.0, 12.0, 55_000.0),
            ],
        }
    }

    /// `Low` for grade ids equal to "low" ignoring case, `High` otherwise.
    pub fn for_grade(grade_id: &str) -> Self {
        if grade_id.eq_ignore_ascii_case("low") {
            Self::low()
        } else {
            Self::high()
        }
    }

    pub fn span(&self) -> Millis {
        self.stages.iter().map(Stage::duration).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub device_id: Arc<str>,
    pub grade: Arc<str>,
    /// 1-based stage number.
    pub stage: u8,
    pub t: Millis,
    pub current_ua: f64,
    pub voltage_mv: f64,
    pub cpu_pct: f64,
    pub mem_kb: f64,
    pub bandwidth_b: f64,
}

pub const DEFAULT_SAMPLE_INTERVAL: Millis = Millis(1000);
pub const METRIC_NOISE: f64 = 0.05;

/// Plays one benchmarking device through `profile` from `start`, sampling
/// every `interval`. Each level gets uniform relative noise of up to ±5%.
/// Stage 3 spreads its communication volume evenly over its samples.
pub fn benchmark_trace(
    device_id: &str,
    grade: &str,
    profile: &StageProfile,
    start: Millis,
    interval: Millis,
    rng: &mut impl Rng,
) -> Vec<MetricSample> {
    let interval = interval.max(Millis(1));
    let device_id: Arc<str> = device_id.into();
    let grade: Arc<str> = grade.into();
    let mut out = Vec::new();
    let mut stage_start = Millis::ZERO;
    for (idx, st) in profile.stages.iter().enumerate() {
        let end = stage_start + st.duration();
        // Sample instants (offsets from `start`) falling in [stage_start, end).
        let first = stage_start.0.div_ceil(interval.0);
        let last = end.0.div_ceil(interval.0);
        let count = last.saturating_sub(first);
        let bytes = if count > 0 { st.commu_kb * 1024.0 / count as f64 } else { 0.0 };
        for s in first..last {
            let mut jitter = |v: f64| v * (1.0 + METRIC_NOISE * rng.random_range(-1.0..=1.0));
            out.push(MetricSample {
                device_id: device_id.clone(),
                grade: grade.clone(),
                stage: idx as u8 + 1,
                t: start + Millis(s * interval.0),
                current_ua: jitter(st.current_ua()),
                voltage_mv: jitter(st.voltage_mv),
                cpu_pct: jitter(st.cpu_pct).min(100.0),
                mem_kb: jitter(st.mem_kb),
                bandwidth_b: jitter(bytes),
            });
        }
        stage_start = end;
    }
    out
}
