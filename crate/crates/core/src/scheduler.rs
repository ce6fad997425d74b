//! Task queue, greedy admission and resource leases.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{evaluate_allocation, solve_allocation, AllocationInput, AllocationPlan, GradeDemand};
use crate::model::{validate_task_spec, GradeSpec, TaskSpec, Violation};
use crate::time::Millis;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("task {0} already submitted")]
    DuplicateTask(String),
    #[error("task {task} is invalid: {}", .violations.iter().map(|v| v.0.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid { task: String, violations: Vec<Violation> },
    #[error("unknown or released lease {0:?}")]
    UnknownLease(LeaseId),
    #[error("lease for grade {0} exceeds free resources")]
    OverAllocation(String),
    #[error("grade {0} not in pool")]
    UnknownGrade(String),
    #[error("task index {0} is not running")]
    NotRunning(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GradePool {
    pub grade_id: String,
    pub bundles_total: u64,
    pub bundles_free: u64,
    pub phones_total: u64,
    pub phones_free: u64,
}

impl GradePool {
    pub fn new(grade_id: &str, bundles: u64, phones: u64) -> Self {
        Self { grade_id: grade_id.into(), bundles_total: bundles, bundles_free: bundles, phones_total: phones, phones_free: phones }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ResourcePool {
    grades: BTreeMap<String, GradePool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFileEntry {
    grade_id: String,
    bundles: u64,
    phones: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFile {
    grades: Vec<PoolFileEntry>,
}

impl ResourcePool {
    pub fn new(grades: impl IntoIterator<Item = GradePool>) -> Self {
        Self { grades: grades.into_iter().map(|g| (g.grade_id.clone(), g)).collect() }
    }

    /// Reads `{"grades":[{"grade_id":..,"bundles":..,"phones":..}]}`.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let f: PoolFile = serde_json::from_str(text)?;
        Ok(Self::new(f.grades.into_iter().map(|g| GradePool::new(&g.grade_id, g.bundles, g.phones))))
    }

    /// Exactly the resources a single task declares: its bundles, plus its
    /// computing and benchmarking phones.
    pub fn for_task(spec: &TaskSpec) -> Self {
        Self::new(spec.grade_demands().map(|(g, d)| GradePool::new(&g.grade_id, g.f, g.m + d.q)))
    }

    pub fn grade(&self, id: &str) -> Option<&GradePool> {
        self.grades.get(id)
    }

    pub fn grades(&self) -> impl Iterator<Item = &GradePool> {
        self.grades.values()
    }

    pub fn is_idle(&self) -> bool {
        self.grades.values().all(|g| g.bundles_free == g.bundles_total && g.phones_free == g.phones_total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct LeaseId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Holding {
    pub grade_id: String,
    pub bundles: u64,
    pub phones: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lease {
    pub id: LeaseId,
    pub task_id: String,
    pub holdings: Vec<Holding>,
    pub issued: Millis,
}

/// Freezes and releases pool resources.
#[derive(Debug, Clone)]
pub struct ResourceManager {
    pool: ResourcePool,
    leases: BTreeMap<LeaseId, Lease>,
    next: u64,
}

impl ResourceManager {
    pub fn new(pool: ResourcePool) -> Self {
        Self { pool, leases: BTreeMap::new(), next: 0 }
    }

    pub fn pool(&self) -> &ResourcePool {
        &self.pool
    }

    pub fn outstanding(&self) -> impl Iterator<Item = &Lease> {
        self.leases.values()
    }

    pub fn freeze(&mut self, task_id: &str, holdings: Vec<Holding>, now: Millis) -> Result<LeaseId, SchedulerError> {
        for h in &holdings {
            let g = self.pool.grades.get(&h.grade_id).ok_or_else(|| SchedulerError::UnknownGrade(h.grade_id.clone()))?;
            if h.bundles > g.bundles_free || h.phones > g.phones_free {
                return Err(SchedulerError::OverAllocation(h.grade_id.clone()));
            }
        }
        for h in &holdings {
            let g = self.pool.grades.get_mut(&h.grade_id).expect("checked above");
            g.bundles_free -= h.bundles;
            g.phones_free -= h.phones;
        }
        let id = LeaseId(self.next);
        self.next += 1;
        self.leases.insert(id, Lease { id, task_id: task_id.into(), holdings, issued: now });
        Ok(id)
    }

    pub fn release(&mut self, id: LeaseId) -> Result<Lease, SchedulerError> {
        let lease = self.leases.remove(&id).ok_or(SchedulerError::UnknownLease(id))?;
        for h in &lease.holdings {
            let g = self.pool.grades.get_mut(&h.grade_id).expect("lease grades exist");
            g.bundles_free += h.bundles;
            g.phones_free += h.phones;
            debug_assert!(g.bundles_free <= g.bundles_total && g.phones_free <= g.phones_total);
        }
        Ok(lease)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Queued,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub spec: TaskSpec,
    pub status: TaskStatus,
    pub plan: Option<AllocationPlan>,
    pub submit_seq: u64,
    pub lease: Option<LeaseId>,
    pub failure: Option<String>,
}

/// Admission of one task: the plan and the grade parameters it was planned
/// against (declared capacity clamped to what was free).
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDecision {
    pub index: usize,
    pub task_id: String,
    pub lease: LeaseId,
    pub plan: AllocationPlan,
    pub grades: Vec<GradeSpec>,
}

/// Plans `spec` against the free part of `pool`. `None` when it cannot run
/// now.
pub fn plan_against_free(spec: &TaskSpec, pool: &ResourcePool) -> Option<(AllocationPlan, Vec<GradeSpec>, Vec<Holding>)> {
    let mut grades = Vec::with_capacity(spec.grades.len());
    for (g, d) in spec.grade_demands() {
        let free = pool.grade(&g.grade_id)?;
        if free.phones_free < d.q {
            return None;
        }
        let mut c = g.clone();
        c.f = g.f.min(free.bundles_free);
        c.m = g.m.min(free.phones_free - d.q);
        grades.push(c);
    }
    let input = AllocationInput::new(grades.iter().cloned().zip(&spec.demand).map(|(g, d)| GradeDemand { grade: g, demand: *d }).collect());
    let plan = match spec.override_vector() {
        Some(x) => evaluate_allocation(&input, &x).ok()?,
        None => solve_allocation(&input).ok()?,
    };
    let holdings = grades
        .iter()
        .zip(&spec.demand)
        .zip(&plan.x)
        .map(|((g, d), &x)| Holding {
            grade_id: g.grade_id.clone(),
            bundles: if x > 0 { g.f } else { 0 },
            phones: if d.computing() > x { g.m } else { 0 } + d.q,
        })
        .collect();
    Some((plan, grades, holdings))
}

/// Queue of submitted tasks over a shared pool.
#[derive(Debug, Clone)]
pub struct TaskManager {
    records: Vec<TaskRecord>,
    resources: ResourceManager,
    base_dir: PathBuf,
    next_seq: u64,
}

impl TaskManager {
    /// `base_dir` anchors relative dataset references during validation.
    pub fn new(pool: ResourcePool, base_dir: &Path) -> Self {
        Self { records: Vec::new(), resources: ResourceManager::new(pool), base_dir: base_dir.to_path_buf(), next_seq: 0 }
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn pool(&self) -> &ResourcePool {
        self.resources.pool()
    }

    pub fn resources(&self) -> &ResourceManager {
        &self.resources
    }

    pub fn enqueue(&mut self, spec: TaskSpec) -> Result<&TaskRecord, SchedulerError> {
        if self.records.iter().any(|r| r.spec.task_id == spec.task_id) {
            return Err(SchedulerError::DuplicateTask(spec.task_id));
        }
        let violations = validate_task_spec(&spec, self.resources.pool(), &self.base_dir);
        if !violations.is_empty() {
            return Err(SchedulerError::Invalid { task: spec.task_id, violations });
        }
        let submit_seq = self.next_seq;
        self.next_seq += 1;
        self.records.push(TaskRecord { spec, status: TaskStatus::Queued, plan: None, submit_seq, lease: None, failure: None });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Admits queued tasks by descending priority, then submission order.
    /// A task that does not fit is skipped, not waited on.
    pub fn tick_schedule(&mut self, now: Millis) -> Vec<ScheduleDecision> {
        let mut queued: Vec<usize> = (0..self.records.len()).filter(|&i| self.records[i].status == TaskStatus::Queued).collect();
        queued.sort_by_key(|&i| (std::cmp::Reverse(self.records[i].spec.priority), self.records[i].submit_seq));
        let mut out = Vec::new();
        for i in queued {
            let Some((plan, grades, holdings)) = plan_against_free(&self.records[i].spec, self.resources.pool()) else {
                continue;
            };
            let task_id = self.records[i].spec.task_id.clone();
            let lease = self.resources.freeze(&task_id, holdings, now).expect("plan fits the free pool");
            let rec = &mut self.records[i];
            rec.status = TaskStatus::Running;
            rec.plan = Some(plan.clone());
            rec.lease = Some(lease);
            out.push(ScheduleDecision { index: i, task_id, lease, plan, grades });
        }
        out
    }

    /// Marks a running task finished and releases its lease.
    pub fn finish(&mut self, index: usize, failure: Option<String>) -> Result<Lease, SchedulerError> {
        let rec = self.records.get_mut(index).ok_or(SchedulerError::NotRunning(index))?;
        if rec.status != TaskStatus::Running {
            return Err(SchedulerError::NotRunning(index));
        }
        let id = rec.lease.take().ok_or(SchedulerError::NotRunning(index))?;
        rec.status = if failure.is_some() { TaskStatus::Failed } else { TaskStatus::Completed };
        rec.failure = failure;
        self.resources.release(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_task_spec;

    fn spec(id: &str, priority: i64, f: u64, m: u64, n: u64) -> TaskSpec {
        let doc = format!(
            r#"{{"task_id":"{id}","priority":{priority},"rounds":1,
            "grades":[{{"grade_id":"High","k":1,"f":{f},"m":{m},"alpha_s":1,"beta_s":1,"lambda_s":0,"N":{n},"q":0}}],
            "operator_flow":[{{"kind":"custom_sleep","params":{{"duration_s":1}}}}]}}"#
        );
        parse_task_spec(&doc).unwrap()
    }

    fn manager(bundles: u64, phones: u64) -> TaskManager {
        TaskManager::new(ResourcePool::new([GradePool::new("High", bundles, phones)]), Path::new("."))
    }

    #[test]
    fn enqueue_sequence() {
        let mut tm = manager(10, 2);
        assert_eq!(tm.tick_schedule(Millis::ZERO), vec![]);
        let r = tm.enqueue(spec("a", 0, 10, 2, 5)).unwrap();
        assert_eq!((r.submit_seq, r.status), (0, TaskStatus::Queued));
        assert_eq!(tm.enqueue(spec("b", 0, 10, 2, 5)).unwrap().submit_seq, 1);
        assert_eq!(tm.enqueue(spec("a", 0, 10, 2, 5)).unwrap_err(), SchedulerError::DuplicateTask("a".into()));
    }

    #[test]
    fn exact_fit_drains_pool() {
        let mut tm = manager(10, 2);
        // 12 devices: 10 logical + 2 phones gives the optimum, using both.
        let mut s = spec("a", 0, 10, 2, 12);
        s.grades[0].beta = Millis(1000);
        tm.enqueue(s).unwrap();
        let d = tm.tick_schedule(Millis::ZERO);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].plan.x, vec![10]);
        let g = tm.pool().grade("High").unwrap();
        assert_eq!((g.bundles_free, g.phones_free), (0, 0));
        tm.finish(0, None).unwrap();
        assert!(tm.pool().is_idle());
        assert_eq!(tm.finish(0, None), Err(SchedulerError::NotRunning(0)));
    }

    #[test]
    fn big_high_priority_task_does_not_block() {
        let mut tm = manager(10, 0);
        tm.enqueue(spec("small", 0, 4, 0, 4)).unwrap();
        tm.enqueue(spec("hog", 5, 10, 0, 10)).unwrap();
        tm.enqueue(spec("filler", 0, 8, 0, 8)).unwrap();
        let first = tm.tick_schedule(Millis::ZERO);
        assert_eq!(first.iter().map(|d| d.task_id.as_str()).collect::<Vec<_>>(), vec!["hog"]);
        tm.finish(first[0].index, None).unwrap();
        // The hog is gone; the rest fit after clamping where needed.
        let second = tm.tick_schedule(Millis(1));
        assert_eq!(second.iter().map(|d| d.task_id.as_str()).collect::<Vec<_>>(), vec!["small", "filler"]);
        assert_eq!(second[1].grades[0].f, 6);
    }

    #[test]
    fn too_big_high_priority_is_skipped() {
        let mut tm = manager(10, 0);
        tm.enqueue(spec("first", 0, 6, 0, 6)).unwrap();
        assert_eq!(tm.tick_schedule(Millis::ZERO).len(), 1);
        let mut big = spec("big", 9, 8, 0, 1);
        big.grades[0].k = 8;
        tm.enqueue(big).unwrap();
        tm.enqueue(spec("small", 0, 4, 0, 4)).unwrap();
        let next = tm.tick_schedule(Millis(1));
        assert_eq!(next.iter().map(|d| d.task_id.as_str()).collect::<Vec<_>>(), vec!["small"]);
        assert_eq!(tm.records()[1].status, TaskStatus::Queued);
    }

    #[test]
    fn lease_release_rules() {
        let mut rm = ResourceManager::new(ResourcePool::new([GradePool::new("High", 10, 4)]));
        let initial = rm.pool().clone();
        let h = |b, p| vec![Holding { grade_id: "High".into(), bundles: b, phones: p }];
        let a = rm.freeze("a", h(3, 1), Millis::ZERO).unwrap();
        let b = rm.freeze("b", h(7, 3), Millis::ZERO).unwrap();
        assert_eq!(rm.freeze("c", h(1, 0), Millis::ZERO), Err(SchedulerError::OverAllocation("High".into())));
        rm.release(b).unwrap();
        rm.release(a).unwrap();
        assert_eq!(rm.pool(), &initial);
        assert_eq!(rm.release(a), Err(SchedulerError::UnknownLease(a)));
    }
}
