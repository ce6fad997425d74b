//! Runs queued tasks on a shared pool inside one virtual clock.
//!
//! Each admitted task repeats its rounds: every simulated device computes,
//! its result is emitted after the response delay, filed on the task's
//! shelf, released by the dispatcher and received by the task's cloud
//! service. A round closes once the cloud has published a model newer than
//! the one the round started from and every device has finished computing,
//! or once nothing further can happen for it (all its messages emitted,
//! nothing scheduled or in flight, and no aggregation pending). After the
//! last round the shelf is flushed, a final aggregation runs over any
//! leftovers, and the lease is released.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{debug, info, warn};
use thiserror::Error;

use crate::catalog::DatasetCatalog;
use crate::cloud::{AggregationTrigger, Buffered, CloudService, HistoryEntry, ModelMetrics, ObjectStore};
use crate::deviceflow::{BatchKind, DispatchBatch, Dispatcher, ScheduledPoint, ShelfMessage, SortOutcome, Sorter};
use crate::emulation::{
    benchmark_trace, execute_operator_flow, simulate_round_device, simulate_round_logical, DeviceContext, MetricSample,
    StageProfile, DEFAULT_SAMPLE_INTERVAL,
};
use crate::engine::{rng_stream, EngineError, EventQueue};
use crate::model::{GradeSpec, TaskSpec};
use crate::report::{
    AggregationRecord, EngineReport, GradeRoundTiming, MessageCounts, PlanReport, RoundReport, TaskReport,
};
use crate::scheduler::{ResourcePool, ScheduleDecision, TaskManager, TaskStatus};
use crate::time::Millis;
use crate::trace::{write_aggregation_csv, write_metrics_csv, write_traffic_csv, EventKind, TraceRecord, TrafficTrace};
use crate::workload::{evaluate, Evaluation, ModelParams};

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Stop the clock here; unfinished tasks are reported as truncated.
    pub horizon: Option<Millis>,
    /// Interval between benchmark metric samples.
    pub sample_interval: Millis,
    /// Directory that relative dataset paths resolve against.
    pub base_dir: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { horizon: None, sample_interval: DEFAULT_SAMPLE_INTERVAL, base_dir: PathBuf::from(".") }
    }
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub report: TaskReport,
    /// Failed validation at submission and never queued.
    pub rejected: bool,
    pub metrics: Vec<MetricSample>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug)]
pub struct BatchOutcome {
    /// In submission order.
    pub tasks: Vec<TaskOutcome>,
    pub trace: TrafficTrace,
    pub events: u64,
    pub end: Millis,
    pub pool: ResourcePool,
    /// Task ids in the order they were admitted.
    pub admissions: Vec<String>,
    /// Times an outstanding-lease total exceeded a pool total.
    pub invariant_violations: u64,
}

impl BatchOutcome {
    pub fn task(&self, task_id: &str) -> Option<&TaskOutcome> {
        self.tasks.iter().find(|t| t.report.task_id == task_id)
    }
}

enum Ev {
    RoundStart(usize),
    Emit(usize, ShelfMessage),
    Point(usize, ScheduledPoint),
    Forward(usize, ShelfMessage),
    Tick(usize),
    CheckClose(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Between rounds: the next round start is scheduled.
    Starting,
    InRound,
    Draining,
    Done,
}

struct GradeAssignment {
    logical: Vec<u32>,
    phones: Vec<u32>,
}

struct TaskRun {
    task_id: Arc<str>,
    spec: TaskSpec,
    grades: Vec<GradeSpec>,
    grade_ids: Vec<Arc<str>>,
    assignment: Vec<GradeAssignment>,
    devices: usize,
    catalog: DatasetCatalog,
    dispatcher: Dispatcher,
    cloud: CloudService,
    store: ObjectStore,
    phase: Phase,
    round: u32,
    round_version: u64,
    compute_end: Millis,
    /// Emissions still to happen, per round.
    round_pending: Vec<u64>,
    outstanding: u64,
    pending_points: u64,
    in_flight: u64,
    flushed: bool,
    ctr: Option<Vec<f64>>,
    counts: MessageCounts,
    rounds: Vec<RoundReport>,
    rounds_completed: u32,
    metrics: Vec<MetricSample>,
    start: Millis,
    end: Option<Millis>,
    failure: Option<String>,
    truncated: bool,
    plan: PlanReport,
}

struct World<'a> {
    manager: TaskManager,
    runs: Vec<Option<TaskRun>>,
    sorter: Sorter,
    trace: TrafficTrace,
    opts: &'a RunOptions,
    admissions: Vec<String>,
    violations: u64,
}

type Queue = EventQueue<Ev>;

fn at(q: &mut Queue, t: Millis, ev: Ev) {
    q.schedule(t.max(q.now()), ev).expect("never in the past");
}

impl World<'_> {
    fn audit(&mut self) {
        let rm = self.manager.resources();
        for g in rm.pool().grades() {
            let (mut bundles, mut phones) = (0u64, 0u64);
            for l in rm.outstanding() {
                for h in l.holdings.iter().filter(|h| h.grade_id == g.grade_id) {
                    bundles += h.bundles;
                    phones += h.phones;
                }
            }
            let ok = bundles <= g.bundles_total
                && phones <= g.phones_total
                && g.bundles_free + bundles == g.bundles_total
                && g.phones_free + phones == g.phones_total;
            if !ok {
                warn!("pool invariant broken for grade {}", g.grade_id);
                self.violations += 1;
            }
        }
    }

    fn admit(&mut self, q: &mut Queue) {
        let now = q.now();
        let decisions = self.manager.tick_schedule(now);
        self.audit();
        for d in decisions {
            self.admissions.push(d.task_id.clone());
            self.start_task(q, d);
        }
    }

    fn start_task(&mut self, q: &mut Queue, d: ScheduleDecision) {
        let now = q.now();
        let spec = self.manager.records()[d.index].spec.clone();
        info!("task {} admitted at {now} with x = {:?}", spec.task_id, d.plan.x);
        let mut next_id = 0u32;
        let assignment = spec
            .demand
            .iter()
            .zip(&d.plan.x)
            .map(|(dem, &x)| {
                let u = dem.computing() as u32;
                let logical = (next_id..next_id + x as u32).collect();
                let phones = (next_id + x as u32..next_id + u).collect();
                next_id += u;
                GradeAssignment { logical, phones }
            })
            .collect();
        let plan = PlanReport::new(&d.plan, d.grades.iter().map(|g| g.f).collect(), d.grades.iter().map(|g| g.m).collect());
        let run = TaskRun {
            task_id: Arc::from(spec.task_id.as_str()),
            grade_ids: d.grades.iter().map(|g| Arc::from(g.grade_id.as_str())).collect(),
            grades: d.grades,
            assignment,
            devices: next_id as usize,
            catalog: DatasetCatalog::new(&self.opts.base_dir),
            dispatcher: Dispatcher::new(spec.dispatch_strategy.clone(), rng_stream(spec.seed, "dropout", 0)),
            cloud: CloudService::new(spec.aggregation_trigger.clone()),
            store: ObjectStore::new(),
            phase: Phase::Starting,
            round: 0,
            round_version: 0,
            compute_end: now,
            round_pending: Vec::new(),
            outstanding: 0,
            pending_points: 0,
            in_flight: 0,
            flushed: false,
            ctr: None,
            counts: MessageCounts::default(),
            rounds: Vec::new(),
            rounds_completed: 0,
            metrics: Vec::new(),
            start: now,
            end: None,
            failure: None,
            truncated: false,
            plan,
            spec,
        };
        if let AggregationTrigger::Scheduled { period } = run.spec.aggregation_trigger {
            at(q, now + period, Ev::Tick(d.index));
        }
        self.runs[d.index] = Some(run);
        at(q, now, Ev::RoundStart(d.index));
    }

    fn run_mut(&mut self, i: usize) -> Option<&mut TaskRun> {
        self.runs[i].as_mut().filter(|r| r.phase != Phase::Done)
    }

    fn handle(&mut self, q: &mut Queue, ev: Ev) -> Result<(), std::convert::Infallible> {
        let now = q.now();
        let (i, result) = match ev {
            Ev::RoundStart(i) => (i, self.start_round(q, i)),
            Ev::Emit(i, msg) => (i, self.on_emit(q, i, msg)),
            Ev::Point(i, p) => (i, self.on_point(q, i, p)),
            Ev::Forward(i, msg) => (i, self.on_forward(q, i, msg)),
            Ev::Tick(i) => (i, self.on_tick(q, i)),
            Ev::CheckClose(i) => (i, Ok(())),
        };
        match result {
            Ok(()) => self.progress(q, i),
            Err(e) => {
                if let Some(run) = self.run_mut(i) {
                    warn!("task {} failed at {now}: {e}", run.task_id);
                    run.failure = Some(e);
                }
                self.complete(q, i);
            }
        }
        Ok(())
    }

    fn start_round(&mut self, q: &mut Queue, i: usize) -> Result<(), String> {
        let now = q.now();
        let interval = self.opts.sample_interval;
        let Some(run) = self.run_mut(i) else { return Ok(()) };
        run.round += 1;
        run.phase = Phase::InRound;
        run.round_version = run.cloud.model().version;
        let r = run.round;
        let seed = run.spec.seed;
        for reference in run.spec.operator_flow.dataset_refs() {
            run.catalog.ensure(reference, run.devices, seed).map_err(|e| e.to_string())?;
        }
        if run.ctr.is_none() {
            let primary = run.spec.operator_flow.primary_dataset().and_then(|p| run.catalog.get(p));
            run.ctr = Some(match primary {
                Some(d) => d.clients.iter().map(|c| c.positive_fraction()).collect(),
                None => vec![0.0; run.devices],
            });
        }
        let delays = run.spec.response_delay.assign(seed, r, run.ctr.as_deref().unwrap_or(&[]));
        let global = run.cloud.model().params.clone();
        let mut timings = Vec::with_capacity(run.grades.len());
        let mut latest = Millis::ZERO;
        let mut emitted = 0u64;
        for (gi, grade) in run.grades.iter().enumerate() {
            let a = &run.assignment[gi];
            let logical = simulate_round_logical(grade, &a.logical).map_err(|e| e.to_string())?;
            let phones = simulate_round_device(grade, &a.phones, r == 1).map_err(|e| e.to_string())?;
            let end = |v: &[crate::emulation::DeviceFinish]| v.iter().map(|d| d.finish).max().unwrap_or(Millis::ZERO);
            timings.push(GradeRoundTiming {
                grade_id: grade.grade_id.clone(),
                logical_end_ms: end(&logical).0,
                phone_end_ms: end(&phones).0,
            });
            latest = latest.max(end(&logical)).max(end(&phones));
            for fin in logical.iter().chain(&phones) {
                let ctx = DeviceContext { device_id: fin.device_id, global: global.as_ref(), data: &run.catalog };
                let out = execute_operator_flow(&ctx, &run.spec.operator_flow).map_err(|e| e.to_string())?;
                let payload_ref = out.payload.map(|p| run.store.put(p));
                let delay = delays.get(fin.device_id as usize).copied().unwrap_or(Millis::ZERO);
                let msg = ShelfMessage {
                    task_id: run.task_id.clone(),
                    round: r,
                    device_id: fin.device_id,
                    grade: run.grade_ids[gi].clone(),
                    sample_count: out.sample_count,
                    payload_ref,
                    emit_time: now.saturating_add(fin.finish).saturating_add(delay),
                };
                at(q, msg.emit_time, Ev::Emit(i, msg));
                emitted += 1;
            }
            let q_bench = run.spec.demand[gi].q;
            let profile = StageProfile::for_grade(&grade.grade_id);
            for j in 0..q_bench {
                let label = format!("{}-bench{j}", grade.grade_id);
                let mut rng = rng_stream(seed, &format!("bench/{}", grade.grade_id), (u64::from(r) << 32) | j);
                run.metrics.extend(benchmark_trace(&label, &grade.grade_id, &profile, now, interval, &mut rng));
            }
        }
        run.compute_end = now + latest;
        run.round_pending.push(emitted);
        run.outstanding += emitted;
        run.rounds.push(RoundReport {
            round: r,
            start_ms: now.0,
            compute_end_ms: run.compute_end.0,
            emission_end_ms: None,
            end_ms: None,
            span_ms: None,
            emitted,
            start_version: run.round_version,
            grades: timings,
        });
        let compute_end = run.compute_end;
        debug!("task {} round {r} started at {now}, {emitted} devices", run.task_id);
        at(q, compute_end, Ev::CheckClose(i));
        if emitted == 0 {
            self.emissions_done(q, i, r)?;
        }
        Ok(())
    }

    /// The round's last emission is on the shelf: anchor rule-based releases.
    fn emissions_done(&mut self, q: &mut Queue, i: usize, round: u32) -> Result<(), String> {
        let now = q.now();
        let Some(run) = self.runs[i].as_mut() else { return Ok(()) };
        run.rounds[round as usize - 1].emission_end_ms = Some(now.0);
        if !run.dispatcher.strategy().is_rule_based() {
            return Ok(());
        }
        let pending = self.sorter.shelf(&run.task_id).map_or(0, |s| s.len() as u64);
        let points = run.dispatcher.round_schedule(now, pending).map_err(|e| e.to_string())?;
        run.pending_points += points.len() as u64;
        for p in points {
            at(q, p.at, Ev::Point(i, p));
        }
        Ok(())
    }

    fn on_emit(&mut self, q: &mut Queue, i: usize, msg: ShelfMessage) -> Result<(), String> {
        let now = q.now();
        let Some(run) = self.runs[i].as_mut().filter(|r| r.phase != Phase::Done) else { return Ok(()) };
        let (task, round, device) = (run.task_id.clone(), msg.round, msg.device_id);
        self.trace.record(now, &task, round, EventKind::Emit, Some(device), 1);
        run.counts.emitted += 1;
        run.outstanding -= 1;
        let left = &mut run.round_pending[round as usize - 1];
        *left -= 1;
        let round_done = *left == 0;
        match self.sorter.sort_incoming(msg) {
            SortOutcome::Duplicate => {
                run.counts.rejected += 1;
                self.trace.record(now, &task, round, EventKind::Reject, Some(device), 1);
            }
            SortOutcome::Shelved { .. } => {
                self.trace.record(now, &task, round, EventKind::Shelve, Some(device), 1);
                let shelf = self.sorter.shelf_mut(&task).expect("just shelved");
                let batches = run.dispatcher.after_shelve(shelf, now);
                for b in batches {
                    self.apply_batch(q, i, b);
                }
            }
        }
        if round_done {
            self.emissions_done(q, i, round)?;
        }
        Ok(())
    }

    fn apply_batch(&mut self, q: &mut Queue, i: usize, batch: DispatchBatch) {
        let now = q.now();
        let run = self.runs[i].as_mut().expect("batch for a live task");
        let task = run.task_id.clone();
        if batch.kind == BatchKind::Flush {
            let n = (batch.forwarded.len() + batch.dropped.len()) as u64;
            self.trace.record(now, &task, run.round, EventKind::Flush, None, n);
        }
        run.counts.shortfall += batch.shortfall;
        for m in batch.dropped {
            self.trace.record(now, &task, m.round, EventKind::Drop, Some(m.device_id), 1);
            run.counts.dropped += 1;
            if let Some(r) = m.payload_ref {
                run.store.remove(r);
            }
        }
        for (t, m) in batch.forwarded {
            self.trace.record(now, &task, m.round, EventKind::Dispatch, Some(m.device_id), 1);
            run.counts.delivered += 1;
            run.in_flight += 1;
            at(q, t, Ev::Forward(i, m));
        }
    }

    fn on_point(&mut self, q: &mut Queue, i: usize, p: ScheduledPoint) -> Result<(), String> {
        let now = q.now();
        let Some(run) = self.runs[i].as_mut().filter(|r| r.phase != Phase::Done) else { return Ok(()) };
        run.pending_points -= 1;
        let task = run.task_id.clone();
        let batch = match self.sorter.shelf_mut(&task) {
            Some(shelf) => run.dispatcher.fire_point(shelf, now, &p),
            None => DispatchBatch { at: now, kind: BatchKind::Dispatch, forwarded: Vec::new(), dropped: Vec::new(), shortfall: p.count },
        };
        self.apply_batch(q, i, batch);
        Ok(())
    }

    fn on_forward(&mut self, q: &mut Queue, i: usize, msg: ShelfMessage) -> Result<(), String> {
        let now = q.now();
        let Some(run) = self.runs[i].as_mut().filter(|r| r.phase != Phase::Done) else { return Ok(()) };
        run.in_flight -= 1;
        self.trace.record(now, &run.task_id, msg.round, EventKind::Receive, Some(msg.device_id), 1);
        match run.cloud.receive_message(&msg, &mut run.store) {
            crate::cloud::ReceiveOutcome::Buffered => run.counts.received += 1,
            crate::cloud::ReceiveOutcome::Corrupt => run.counts.corrupt += 1,
        }
        self.aggregate(now, i, false)
    }

    fn on_tick(&mut self, q: &mut Queue, i: usize) -> Result<(), String> {
        let now = q.now();
        let Some(run) = self.runs[i].as_mut().filter(|r| r.phase != Phase::Done) else { return Ok(()) };
        if let AggregationTrigger::Scheduled { period } = run.cloud.trigger() {
            at(q, now + *period, Ev::Tick(i));
        }
        self.aggregate(now, i, true)
    }

    fn aggregate(&mut self, now: Millis, i: usize, boundary: bool) -> Result<(), String> {
        let run = self.runs[i].as_mut().expect("live task");
        let TaskRun { cloud, catalog, spec, .. } = run;
        let primary = spec.operator_flow.primary_dataset().and_then(|p| catalog.get(p));
        let fired = cloud
            .maybe_aggregate(now, boundary, |params, batch| model_metrics(primary, params, batch))
            .map_err(|e| e.to_string())?
            .map(|h| h.messages);
        if let Some(messages) = fired {
            self.trace.record(now, &run.task_id, run.round, EventKind::Aggregate, None, messages);
        }
        Ok(())
    }

    fn progress(&mut self, q: &mut Queue, i: usize) {
        let now = q.now();
        let Some(run) = self.runs[i].as_mut().filter(|r| r.phase != Phase::Done) else { return };
        if run.phase == Phase::InRound {
            let r = run.round as usize;
            let newer = run.cloud.model().version > run.round_version && now >= run.compute_end;
            let quiet = run.round_pending[r - 1] == 0
                && run.pending_points == 0
                && run.in_flight == 0
                && !matches!(run.cloud.trigger(), AggregationTrigger::Scheduled { .. } if run.cloud.buffer_len() > 0);
            if newer || quiet {
                let rr = &mut run.rounds[r - 1];
                rr.end_ms = Some(now.0);
                rr.span_ms = Some(now.0 - rr.start_ms);
                run.rounds_completed += 1;
                if run.round < run.spec.rounds {
                    run.phase = Phase::Starting;
                    at(q, now, Ev::RoundStart(i));
                } else {
                    run.phase = Phase::Draining;
                }
            }
        }
        if run.phase != Phase::Draining {
            return;
        }
        if !run.flushed && run.outstanding == 0 && run.pending_points == 0 {
            run.flushed = true;
            let task = run.task_id.clone();
            if let Some(shelf) = self.sorter.shelf_mut(&task) {
                if !shelf.is_empty() {
                    let batch = run.dispatcher.flush(shelf, now);
                    self.apply_batch(q, i, batch);
                }
            }
        }
        let run = self.runs[i].as_mut().expect("live task");
        if run.flushed && run.in_flight == 0 {
            let TaskRun { cloud, catalog, spec, .. } = run;
            let primary = spec.operator_flow.primary_dataset().and_then(|p| catalog.get(p));
            match cloud.flush_aggregate(now, |params, batch| model_metrics(primary, params, batch)) {
                Ok(Some(h)) => {
                    let messages = h.messages;
                    self.trace.record(now, &run.task_id, run.round, EventKind::Aggregate, None, messages);
                }
                Ok(None) => {}
                Err(e) => run.failure = Some(e.to_string()),
            }
            self.complete(q, i);
        }
    }

    fn complete(&mut self, q: &mut Queue, i: usize) {
        let now = q.now();
        let Some(run) = self.runs[i].as_mut().filter(|r| r.phase != Phase::Done) else { return };
        run.phase = Phase::Done;
        run.end = Some(now);
        let failure = run.failure.clone();
        if let Err(e) = self.manager.finish(i, failure) {
            warn!("finishing task {}: {e}", run.task_id);
        }
        self.audit();
        self.admit(q);
    }

    fn truncate(&mut self, now: Millis) {
        for i in 0..self.runs.len() {
            if let Some(run) = self.runs[i].as_mut().filter(|r| r.phase != Phase::Done) {
                run.phase = Phase::Done;
                run.truncated = true;
                run.end = Some(now);
                if let Err(e) = self.manager.finish(i, None) {
                    warn!("finishing task {}: {e}", run.task_id);
                }
            }
        }
        self.audit();
    }
}

/// Accuracy and loss over the participating clients' data, and accuracy on
/// the held-out set.
fn model_metrics(
    data: Option<&crate::catalog::LoadedDataset>,
    params: &ModelParams<f64>,
    batch: &[Buffered],
) -> ModelMetrics {
    let Some(data) = data else { return ModelMetrics::default() };
    let mut ids: Vec<u32> = batch.iter().map(|b| b.device_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let (mut n, mut correct, mut loss) = (0usize, 0.0, 0.0);
    for id in ids {
        let Some(c) = data.clients.get(id as usize).filter(|c| !c.rows.is_empty()) else { continue };
        if let Ok(e) = evaluate(params, &c.rows) {
            let k = c.rows.len();
            n += k;
            correct += e.accuracy * k as f64;
            loss += e.loss * k as f64;
        }
    }
    let train = (n > 0).then(|| Evaluation { accuracy: correct / n as f64, loss: loss / n as f64 });
    let test_acc = if data.test.is_empty() { None } else { evaluate(params, &data.test).ok().map(|e| e.accuracy) };
    ModelMetrics { train, test_acc }
}

/// Submits `specs` together to a manager over `pool` and runs the virtual
/// clock until every task finishes or `opts.horizon` is reached.
pub fn run_batch(specs: Vec<TaskSpec>, pool: ResourcePool, opts: &RunOptions) -> Result<BatchOutcome, PlatformError> {
    let mut manager = TaskManager::new(pool, &opts.base_dir);
    let mut rejected: Vec<(usize, TaskReport)> = Vec::new();
    let mut slots: Vec<Option<usize>> = Vec::with_capacity(specs.len());
    for (pos, spec) in specs.into_iter().enumerate() {
        let (id, seed) = (spec.task_id.clone(), spec.seed);
        match manager.enqueue(spec) {
            Ok(_) => slots.push(Some(manager.records().len() - 1)),
            Err(e) => {
                let mut r = TaskReport::empty(&id, seed);
                r.status = TaskStatus::Failed;
                r.failure = Some(e.to_string());
                rejected.push((pos, r));
                slots.push(None);
            }
        }
    }
    let n = manager.records().len();
    let mut world = World {
        manager,
        runs: (0..n).map(|_| None).collect(),
        sorter: Sorter::new(),
        trace: TrafficTrace::new(),
        opts,
        admissions: Vec::new(),
        violations: 0,
    };
    let mut q: Queue = EventQueue::new();
    world.admit(&mut q);
    let horizon = opts.horizon.unwrap_or(Millis::MAX);
    q.run_until(horizon, |q, ev| world.handle(q, ev.payload))?;
    let end = q.now();
    world.truncate(end);
    let events = q.processed();

    let mut tasks = Vec::with_capacity(slots.len());
    let mut rejected = rejected.into_iter().peekable();
    for (pos, slot) in slots.into_iter().enumerate() {
        match slot {
            None => {
                let (p, report) = rejected.next().expect("one report per rejected spec");
                debug_assert_eq!(p, pos);
                tasks.push(TaskOutcome { report, rejected: true, metrics: Vec::new(), history: Vec::new() });
            }
            Some(idx) => tasks.push(world.outcome(idx, events, end)),
        }
    }
    Ok(BatchOutcome {
        tasks,
        pool: world.manager.pool().clone(),
        trace: world.trace,
        events,
        end,
        admissions: world.admissions,
        invariant_violations: world.violations,
    })
}

impl World<'_> {
    fn outcome(&mut self, idx: usize, events: u64, end: Millis) -> TaskOutcome {
        let rec = &self.manager.records()[idx];
        let mut report = TaskReport::empty(&rec.spec.task_id, rec.spec.seed);
        report.status = rec.status;
        report.failure = rec.failure.clone();
        report.engine = EngineReport { events, end_ms: end.0 };
        let Some(run) = self.runs[idx].take() else {
            return TaskOutcome { report, rejected: false, metrics: Vec::new(), history: Vec::new() };
        };
        let residual = self.sorter.shelf(&run.task_id).map_or(0, |s| s.len() as u64);
        let history = run.cloud.model().history.clone();
        let last_eval = history.iter().rev().find(|h| h.test_acc.is_some() || h.train_acc.is_some());
        report.truncated = run.truncated;
        report.plan = Some(run.plan);
        report.start_ms = Some(run.start.0);
        report.end_ms = run.end.map(|e| e.0);
        report.rounds_completed = run.rounds_completed;
        report.rounds = run.rounds;
        report.counts = MessageCounts { residual, corrupt: run.cloud.corrupt(), ..run.counts };
        report.aggregations = history.iter().map(AggregationRecord::from).collect();
        report.final_version = run.cloud.model().version;
        report.final_test_acc = last_eval.and_then(|h| h.test_acc).map(crate::trace::round_sig);
        report.final_train_acc = last_eval.and_then(|h| h.train_acc).map(crate::trace::round_sig);
        report.final_loss = last_eval.and_then(|h| h.loss).map(crate::trace::round_sig);
        report.benchmark_samples = run.metrics.len() as u64;
        TaskOutcome { report, rejected: false, metrics: run.metrics, history }
    }
}

/// Runs one task on exactly the resources it declares.
pub fn run_task(spec: TaskSpec, opts: &RunOptions) -> Result<(TaskOutcome, TrafficTrace, BatchOutcome), PlatformError> {
    let pool = ResourcePool::for_task(&spec);
    let mut batch = run_batch(vec![spec], pool, opts)?;
    let task = batch.tasks.remove(0);
    let trace = std::mem::take(&mut batch.trace);
    Ok((task, trace, batch))
}

/// Writes `traffic.csv`, `metrics.csv`, `aggregation.csv` and `report.json`
/// for one task into `dir`.
pub fn write_task_outputs(dir: &Path, task: &TaskOutcome, records: &[TraceRecord]) -> Result<(), PlatformError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| PlatformError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let seed = task.report.seed;
    let files = &task.report.traces;
    let p = dir.join(&files.traffic);
    write_traffic_csv(&p, seed, records).map_err(io(&p))?;
    let p = dir.join(&files.metrics);
    write_metrics_csv(&p, seed, &task.metrics).map_err(io(&p))?;
    let p = dir.join(&files.aggregation);
    write_aggregation_csv(&p, seed, &task.history).map_err(io(&p))?;
    let p = dir.join("report.json");
    task.report.write(&p).map_err(io(&p))
}
