#![allow(dead_code)]

use std::collections::BTreeMap;

use edgesim::model::{parse_task_spec, TaskSpec};
use edgesim::platform::TaskOutcome;
use edgesim::scheduler::ResourcePool;
use edgesim::trace::{peak_receive_rate, EventKind, TraceRecord};
use rand::Rng;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Grade {
    pub id: &'static str,
    pub k: u64,
    pub f: u64,
    pub m: u64,
    pub alpha_s: f64,
    pub beta_s: f64,
    pub lambda_s: f64,
    pub n: u64,
    pub q: u64,
}

impl Grade {
    pub fn new(id: &'static str, k: u64, f: u64, m: u64, alpha_s: f64, beta_s: f64, lambda_s: f64, n: u64, q: u64) -> Self {
        Self { id, k, f, m, alpha_s, beta_s, lambda_s, n, q }
    }

    fn to_json(&self) -> Value {
        json!({
            "grade_id": self.id, "k": self.k, "f": self.f, "m": self.m,
            "alpha_s": self.alpha_s, "beta_s": self.beta_s, "lambda_s": self.lambda_s,
            "N": self.n, "q": self.q,
        })
    }
}

/// Task document with pass-through dispatch, a one-sample trigger and no
/// response delay unless overridden.
pub struct TaskDoc {
    pub doc: Value,
}

impl TaskDoc {
    pub fn new(id: &str, rounds: u32, seed: u64, grades: &[Grade]) -> Self {
        Self {
            doc: json!({
                "task_id": id,
                "rounds": rounds,
                "seed": seed,
                "grades": grades.iter().map(Grade::to_json).collect::<Vec<_>>(),
                "operator_flow": [ { "kind": "custom_sleep", "params": { "duration_s": 0.5 } } ],
            }),
        }
    }

    pub fn set(mut self, key: &str, v: Value) -> Self {
        self.doc[key] = v;
        self
    }

    pub fn train(self, dataset: &str, epochs: u64, lr: f64) -> Self {
        self.set(
            "operator_flow",
            json!([ { "kind": "train_lr", "dataset_ref": dataset, "params": { "epochs": epochs, "learning_rate": lr } } ]),
        )
    }

    pub fn spec(&self) -> TaskSpec {
        parse_task_spec(&self.doc.to_string()).unwrap_or_else(|e| panic!("bad test spec: {e}\n{}", self.doc))
    }
}

pub fn rate_segment(kind: Value, from: f64, to: f64) -> Value {
    json!({ "segments": [ { "from": from, "to": to, "fn": kind } ] })
}

/// Random dispatch strategy, with or without dropout.
pub fn random_strategy(rng: &mut impl Rng, dropout: bool) -> Value {
    let p = |rng: &mut dyn rand::RngCore| if dropout { [0.0, 0.1, 0.5, 0.9][rng.random_range(0..4)] } else { 0.0 };
    let cap = [5u64, 50, 700][rng.random_range(0..3)];
    match rng.random_range(0..3) {
        0 => {
            let n = rng.random_range(1..4);
            let thresholds: Vec<u64> = (0..n).map(|_| rng.random_range(1..20)).collect();
            json!({ "type": "real_time_accumulated", "thresholds": thresholds, "p_fail": p(rng), "capacity_per_sec": cap })
        }
        1 => {
            let n = rng.random_range(1..5);
            let points: Vec<Value> = (0..n)
                .map(|i| {
                    json!({
                        "at_s": i as f64 * rng.random_range(0.5..30.0),
                        "count": rng.random_range(0..80),
                        "p_fail": p(rng),
                        "discard": if dropout { rng.random_range(0..3) } else { 0 },
                    })
                })
                .collect();
            json!({ "type": "time_point", "points": points, "capacity_per_sec": cap })
        }
        _ => {
            let kind = match rng.random_range(0..4) {
                0 => json!({ "kind": "normal_pdf", "mu": 0.0, "sigma": 1.0 }),
                1 => json!({ "kind": "sin_plus1" }),
                2 => json!({ "kind": "exp_base", "base": 2.0 }),
                _ => json!({ "kind": "constant", "value": 1.0 }),
            };
            json!({
                "type": "time_interval",
                "rate": rate_segment(kind, 0.0, 3.0),
                "domain": [0.0, 3.0],
                "start_s": rng.random_range(0.0..5.0),
                "length_s": rng.random_range(1.0..40.0),
                "p_fail": p(rng),
                "discard_per_interval": if dropout { rng.random_range(0..3) } else { 0 },
                "capacity_per_sec": cap,
            })
        }
    }
}

/// Sums of `count` per (round, event) for one task.
pub fn per_round(records: &[TraceRecord], task: &str) -> BTreeMap<(u32, EventKind), u64> {
    let mut out = BTreeMap::new();
    for r in records.iter().filter(|r| &*r.task_id == task) {
        *out.entry((r.round, r.event)).or_insert(0) += r.count;
    }
    out
}

pub fn total(records: &[TraceRecord], task: &str, event: EventKind) -> u64 {
    records.iter().filter(|r| &*r.task_id == task && r.event == event).map(|r| r.count).sum()
}

/// Checks every per-round conservation identity; returns a description of
/// the first failure.
pub fn conservation_failure(records: &[TraceRecord], task: &TaskOutcome) -> Option<String> {
    let id = task.report.task_id.as_str();
    let by_round = per_round(records, id);
    let rounds: std::collections::BTreeSet<u32> = by_round.keys().map(|(r, _)| *r).collect();
    let get = |r: u32, e: EventKind| by_round.get(&(r, e)).copied().unwrap_or(0);
    let mut residual = 0;
    for r in rounds {
        let (emit, disp, drop, rej) = (get(r, EventKind::Emit), get(r, EventKind::Dispatch), get(r, EventKind::Drop), get(r, EventKind::Reject));
        if disp + drop + rej > emit {
            return Some(format!("{id} round {r}: {disp} delivered + {drop} dropped exceed {emit} emitted"));
        }
        residual += emit - disp - drop - rej;
    }
    let c = &task.report.counts;
    if residual != c.residual {
        return Some(format!("{id}: trace leaves {residual} unforwarded but the shelf holds {}", c.residual));
    }
    if c.emitted != c.delivered + c.dropped + c.residual + c.rejected {
        return Some(format!("{id}: report counts do not balance: {c:?}"));
    }
    None
}

/// Collects capacity violations: any task whose forwarded messages exceed
/// its capacity in some 1 s window.
#[derive(Default)]
pub struct CapacityAudit {
    pub traces: usize,
    pub tasks: usize,
    pub violations: Vec<String>,
}

impl CapacityAudit {
    pub fn check(&mut self, records: &[TraceRecord], capacity: &BTreeMap<String, u64>) {
        self.traces += 1;
        for (task, peak) in peak_receive_rate(records) {
            self.tasks += 1;
            let cap = capacity.get(&*task).copied().unwrap_or(0);
            if peak > cap {
                self.violations.push(format!("{task}: {peak} forwarded in one second, capacity {cap}"));
            }
        }
    }
}

pub fn capacities(specs: &[TaskSpec]) -> BTreeMap<String, u64> {
    specs.iter().map(|s| (s.task_id.clone(), s.dispatch_strategy.capacity_per_sec())).collect()
}

/// Sweeps the reported lease intervals and checks that held resources never
/// exceed the pool. Releases at an instant happen before admissions.
pub fn overallocation(specs: &[TaskSpec], tasks: &[TaskOutcome], pool: &ResourcePool) -> Option<String> {
    let mut events: Vec<(u64, bool, &str, u64, u64)> = Vec::new();
    for t in tasks {
        let (Some(plan), Some(start)) = (&t.report.plan, t.report.start_ms) else { continue };
        let end = t.report.end_ms.unwrap_or(u64::MAX);
        let spec = specs.iter().find(|s| s.task_id == t.report.task_id).expect("spec for task");
        for (i, (g, d)) in spec.grade_demands().enumerate() {
            let bundles = if plan.x[i] > 0 { plan.bundles[i] } else { 0 };
            let phones = if d.computing() > plan.x[i] { plan.phones[i] } else { 0 } + d.q;
            events.push((start, true, g.grade_id.as_str(), bundles, phones));
            events.push((end, false, g.grade_id.as_str(), bundles, phones));
        }
    }
    events.sort_by_key(|e| (e.0, e.1));
    let mut held: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (t, acquire, grade, b, p) in events {
        let h = held.entry(grade).or_default();
        if acquire {
            h.0 += b;
            h.1 += p;
            let g = pool.grade(grade)?;
            if h.0 > g.bundles_total || h.1 > g.phones_total {
                return Some(format!("grade {grade} over-allocated at {t} ms: {h:?}"));
            }
        } else {
            h.0 -= b;
            h.1 -= p;
        }
    }
    None
}
