mod common;

use std::collections::BTreeSet;

use common::{conservation_failure, overallocation, random_strategy, total, Grade, TaskDoc};
use edgesim::allocation::{
    brute_force_allocation, device_term, logical_term, solve_allocation, AllocationInput, GradeDemand,
};
use edgesim::cloud::fedavg_aggregate;
use edgesim::emulation::ResponseDelayModel;
use edgesim::engine::{rng_stream, EventQueue};
use edgesim::model::{parse_task_spec, serialize_task_spec, validate_task_spec, Demand, GradeSpec, TaskSpec};
use edgesim::platform::{run_batch, RunOptions};
use edgesim::scheduler::{GradePool, ResourcePool, TaskManager, TaskStatus};
use edgesim::trace::EventKind;
use edgesim::workload::data::{generate_synthetic_ctr, partition, PartitionSpec, SyntheticCtrConfig};
use edgesim::workload::lr::train_local_lr;
use edgesim::workload::ModelParams;
use edgesim::Millis;
use proptest::prelude::*;
use rand::Rng;
use serde_json::json;

fn random_task(seed: u64, id: &str) -> TaskSpec {
    let mut r = rng_stream(seed, "task", 0);
    let mut grades = vec![];
    for gid in ["High", "Low"] {
        if grades.is_empty() || r.random_bool(0.5) {
            let k = r.random_range(1..3);
            let m = r.random_range(1..4);
            let n = r.random_range(1..60);
            grades.push(Grade::new(
                gid,
                k,
                r.random_range(k..10),
                m,
                r.random_range(1..20) as f64,
                r.random_range(1..20) as f64 + 0.25,
                r.random_range(0..5) as f64,
                n,
                r.random_range(0..=n.min(m).min(1)),
            ));
        }
    }
    let trigger = if r.random_bool(0.5) {
        json!({ "type": "sample_threshold", "samples": r.random_range(1..40) })
    } else {
        json!({ "type": "scheduled", "period_s": r.random_range(1..30) })
    };
    TaskDoc::new(id, r.random_range(1..4), seed, &grades)
        .train("synthetic?rows=400&dim=32&seed=1&rows_per_client=5", 2, 0.5)
        .set("priority", json!(r.random_range(-2..3)))
        .set("dispatch_strategy", random_strategy(&mut r, true))
        .set("aggregation_trigger", trigger)
        .set("response_delay", json!({ "type": "right_tail_normal", "sigma": 1.5, "scale_s": 5, "ctr_linked": r.random_bool(0.5) }))
        .spec()
}

fn grade(k: u64, f: u64, m: u64, a: u64, b: u64, l: u64) -> GradeSpec {
    GradeSpec { grade_id: "g".into(), k, f, m, alpha: Millis(a), beta: Millis(b), lambda: Millis(l) }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn spec_round_trips(seed in any::<u64>()) {
        let spec = random_task(seed, "rt");
        let again = parse_task_spec(&serialize_task_spec(&spec)).unwrap();
        prop_assert_eq!(&again, &spec);
        prop_assert_eq!(serialize_task_spec(&again), serialize_task_spec(&spec));
    }

    #[test]
    fn validation_is_pure(seed in any::<u64>(), bundles in 0u64..12, phones in 0u64..6) {
        let spec = random_task(seed, "pure");
        let pool = ResourcePool::new([GradePool::new("High", bundles, phones), GradePool::new("Low", bundles, phones)]);
        let (s0, p0) = (spec.clone(), pool.clone());
        let first = validate_task_spec(&spec, &pool, std::path::Path::new("."));
        let second = validate_task_spec(&spec, &pool, std::path::Path::new("."));
        prop_assert_eq!(first, second);
        prop_assert_eq!(spec, s0);
        prop_assert_eq!(pool, p0);
    }

    #[test]
    fn terms_are_monotone(k in 1u64..4, extra in 0u64..8, m in 0u64..5, a in 1u64..90_000, b in 1u64..90_000, l in 0u64..30_000, n in 0u64..60) {
        let g = grade(k, k + extra, m, a, b, l);
        let d = Demand { n, q: 0 };
        let mut prev: Option<(Millis, Millis)> = None;
        for x in 0..=n {
            let (tl, tp) = (logical_term(&g, x), device_term(&g, &d, x));
            if let (Ok(tl), Ok(tp)) = (tl, tp) {
                if let Some((pl, pp)) = prev {
                    prop_assert!(tl >= pl);
                    prop_assert!(tp <= pp);
                }
                prev = Some((tl, tp));
            }
        }
    }

    #[test]
    fn optimum_decomposes_by_grade(seed in any::<u64>()) {
        let mut r = rng_stream(seed, "decomp", 0);
        let grades: Vec<GradeDemand> = (0..r.random_range(1..4)).map(|i| {
            let k = r.random_range(1..3);
            let mut g = grade(k, r.random_range(k..8), r.random_range(1..4), r.random_range(1..50) * 1000, r.random_range(1..50) * 1000, r.random_range(0..20) * 1000);
            g.grade_id = format!("g{i}");
            let n = r.random_range(1..40);
            GradeDemand::new(g, n, r.random_range(0..=n.min(2)))
        }).collect();
        let input = AllocationInput::new(grades);
        let plan = solve_allocation(&input).unwrap();
        let oracle = brute_force_allocation(&input).unwrap();
        prop_assert_eq!(plan.t_total, oracle.t_total);
        prop_assert_eq!(plan.x.iter().sum::<u64>(), oracle.x.iter().sum::<u64>());
        let per_grade = input.grades.iter().map(|gd| {
            (0..=gd.demand.computing())
                .filter_map(|x| Some(logical_term(&gd.grade, x).ok()?.max(device_term(&gd.grade, &gd.demand, x).ok()?)))
                .min()
                .unwrap()
        }).max().unwrap();
        prop_assert_eq!(plan.t_total, per_grade);
    }

    #[test]
    fn clock_never_runs_backwards(times in prop::collection::vec(0u64..10_000, 1..60), follow in 0u64..500) {
        let mut q: EventQueue<u64> = EventQueue::new();
        for &t in &times {
            q.schedule(Millis(t), t).unwrap();
        }
        let mut seen = Vec::new();
        q.run_until(Millis::MAX, |q, ev| -> Result<(), String> {
            seen.push(q.now());
            if ev.payload % 3 == 0 && q.len() < 200 {
                q.schedule_in(Millis(follow), ev.payload + 1);
            }
            Ok(())
        }).unwrap();
        prop_assert!(seen.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(seen.len() >= times.len());
    }

    #[test]
    fn delays_follow_ctr(seed in any::<u64>(), sigma in 0.1f64..4.0, ctr in prop::collection::vec(0.0f64..1.0, 1..80)) {
        let model = ResponseDelayModel::RightTailNormal { sigma, scale: 10.0, ctr_linked: true };
        let d = model.assign(seed, 1, &ctr);
        prop_assert_eq!(d.len(), ctr.len());
        for i in 0..ctr.len() {
            for j in 0..ctr.len() {
                if ctr[i] > ctr[j] {
                    prop_assert!(d[i] <= d[j]);
                }
            }
        }
        // Same draws at a larger sigma never shrink.
        let wider = ResponseDelayModel::RightTailNormal { sigma: sigma * 2.0, scale: 10.0, ctr_linked: true }.assign(seed, 1, &ctr);
        prop_assert!(d.iter().zip(&wider).all(|(a, b)| a <= b));
    }

    #[test]
    fn fedavg_stays_within_client_range(
        clients in prop::collection::vec((prop::collection::vec(-1e3f64..1e3, 4), -1e3f64..1e3, 1u64..1000), 1..12)
    ) {
        let params: Vec<ModelParams<f64>> = clients.iter().map(|(w, b, _)| ModelParams { weights: w.clone(), bias: *b }).collect();
        let items: Vec<(&ModelParams<f64>, u64)> = params.iter().zip(&clients).map(|(p, c)| (p, c.2)).collect();
        let avg = fedavg_aggregate(&items).unwrap();
        for j in 0..5 {
            let coord = |p: &ModelParams<f64>| if j < 4 { p.weights[j] } else { p.bias };
            let lo = params.iter().map(coord).fold(f64::INFINITY, f64::min);
            let hi = params.iter().map(coord).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= coord(&avg) && coord(&avg) <= hi);
        }
    }

    #[test]
    fn partitions_keep_every_row(seed in any::<u64>(), n in 1usize..30, variant in 0usize..2, c in 0.0f64..1.0, h in 0.0f64..1.0, l in 0.0f64..1.0) {
        let data = generate_synthetic_ctr::<f64>(&SyntheticCtrConfig::new(300, 16), &mut rng_stream(seed, "rows", 0));
        let spec = if variant == 0 { PartitionSpec::Iid } else {
            PartitionSpec::Skewed { high_pos_fraction_clients: c, pos_fraction_high: h, pos_fraction_low: l }
        };
        let parts = partition(&data, n, &spec, &mut rng_stream(seed, "split", 0)).unwrap();
        prop_assert_eq!(parts.len(), n);
        let key = |e: &edgesim::workload::Example<f64>| format!("{:?}{}", e.features, e.label);
        let mut want: Vec<String> = data.rows.iter().map(key).collect();
        let mut got: Vec<String> = parts.iter().flat_map(|p| p.rows.iter().map(key)).collect();
        want.sort();
        got.sort();
        prop_assert_eq!(got, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn platform_runs_conserve_and_agree_with_their_traces(seed in any::<u64>(), truncate in any::<bool>()) {
        let spec = random_task(seed, "run");
        let pool = ResourcePool::for_task(&spec);
        let horizon = truncate.then(|| Millis(20_000 + seed % 100_000));
        let res = run_batch(vec![spec.clone()], pool, &RunOptions { horizon, ..RunOptions::default() }).unwrap();
        let task = &res.tasks[0];
        let recs = res.trace.records();
        prop_assert_eq!(conservation_failure(recs, task), None);
        let c = &task.report.counts;
        prop_assert_eq!(c.emitted, total(recs, "run", EventKind::Emit));
        prop_assert_eq!(c.delivered, total(recs, "run", EventKind::Dispatch));
        prop_assert_eq!(c.dropped, total(recs, "run", EventKind::Drop));
        prop_assert_eq!(c.received + c.corrupt, total(recs, "run", EventKind::Receive));
        prop_assert_eq!(task.report.aggregations.len() as u64, recs.iter().filter(|r| r.event == EventKind::Aggregate).count() as u64);
        // Threshold aggregations cover at least the threshold, except the final flush.
        if let edgesim::cloud::AggregationTrigger::SampleThreshold { samples } = spec.aggregation_trigger {
            prop_assert!(task.history.iter().filter(|h| !h.flush).all(|h| h.samples >= samples));
        }
        // Benchmarking devices never emit; every computing device emits once per started round.
        let started = task.report.rounds.len() as u64;
        let emits_per_round = spec.computing_devices();
        let emitted_ids: BTreeSet<u32> = recs.iter().filter(|r| r.event == EventKind::Emit).filter_map(|r| r.device_id).collect();
        prop_assert!(emitted_ids.iter().all(|&id| (id as u64) < emits_per_round));
        if !task.report.truncated {
            prop_assert_eq!(c.emitted, started * emits_per_round);
        }
        // FIFO: forwarded messages leave in shelving order.
        let shelved: Vec<(u32, Option<u32>)> = recs.iter().filter(|r| r.event == EventKind::Shelve).map(|r| (r.round, r.device_id)).collect();
        let forwarded: Vec<(u32, Option<u32>)> = recs.iter().filter(|r| r.event == EventKind::Dispatch).map(|r| (r.round, r.device_id)).collect();
        let mut it = shelved.iter();
        prop_assert!(forwarded.iter().all(|f| it.any(|s| s == f)));
    }

    #[test]
    fn concurrent_tasks_do_not_see_each_other(a in any::<u64>(), b in any::<u64>()) {
        let (ta, tb) = (random_task(a, "alpha"), random_task(b, "beta"));
        let alone = |s: &TaskSpec| run_batch(vec![s.clone()], ResourcePool::for_task(s), &RunOptions::default()).unwrap();
        // A pool with room for both side by side.
        let mut grades = std::collections::BTreeMap::<String, (u64, u64)>::new();
        for s in [&ta, &tb] {
            for (g, d) in s.grade_demands() {
                let e = grades.entry(g.grade_id.clone()).or_default();
                e.0 += g.f;
                e.1 += g.m + d.q;
            }
        }
        let pool = ResourcePool::new(grades.iter().map(|(id, (f, m))| GradePool::new(id, *f, *m)));
        let both = run_batch(vec![ta.clone(), tb.clone()], pool, &RunOptions::default()).unwrap();
        for (spec, solo) in [(&ta, alone(&ta)), (&tb, alone(&tb))] {
            prop_assert_eq!(both.trace.for_task(&spec.task_id), solo.trace.for_task(&spec.task_id));
        }
    }

    #[test]
    fn batches_never_overallocate(seed in any::<u64>()) {
        let mut r = rng_stream(seed, "batch", 0);
        let specs: Vec<TaskSpec> = (0..r.random_range(2..6)).map(|i| random_task(seed ^ (i * 7919), &format!("t{i}"))).collect();
        let pool = ResourcePool::new([GradePool::new("High", r.random_range(9..20), r.random_range(4..8)), GradePool::new("Low", r.random_range(9..20), r.random_range(4..8))]);
        let first = run_batch(specs.clone(), pool.clone(), &RunOptions::default()).unwrap();
        prop_assert_eq!(first.invariant_violations, 0);
        prop_assert_eq!(overallocation(&specs, &first.tasks, &pool), None);
        prop_assert_eq!(&first.pool, &pool);
        prop_assert!(first.tasks.iter().all(|t| t.report.status == TaskStatus::Completed));
        let second = run_batch(specs, pool, &RunOptions::default()).unwrap();
        prop_assert_eq!(first.admissions, second.admissions);
        prop_assert_eq!(first.trace.records(), second.trace.records());
    }
}

#[test]
fn higher_priority_admitted_first_when_both_fit() {
    let pool = ResourcePool::new([GradePool::new("High", 4, 2)]);
    let spec = |id: &str, priority: i64| {
        TaskDoc::new(id, 1, 0, &[Grade::new("High", 1, 4, 2, 1.0, 1.0, 0.0, 5, 0)]).set("priority", json!(priority)).spec()
    };
    let mut tm = TaskManager::new(pool, std::path::Path::new("."));
    for (id, p) in [("low", 0), ("tie-first", 5), ("tie-second", 5)] {
        tm.enqueue(spec(id, p)).unwrap();
    }
    let order: Vec<String> = tm.tick_schedule(Millis::ZERO).into_iter().map(|d| d.task_id).collect();
    // Only one fits at a time; the earlier of the two top-priority tasks wins.
    assert_eq!(order, ["tie-first"]);
    tm.finish(1, None).unwrap();
    let next: Vec<String> = tm.tick_schedule(Millis(1)).into_iter().map(|d| d.task_id).collect();
    assert_eq!(next, ["tie-second"]);
}

#[test]
fn identical_clients_average_to_single_client_training() {
    let data = generate_synthetic_ctr::<f64>(&SyntheticCtrConfig::new(40, 16), &mut rng_stream(1, "fp", 0));
    let start = ModelParams::<f64>::zeros(16);
    let solo = train_local_lr(&start, &data.rows, 5, 0.3).unwrap().params;
    let trained: Vec<ModelParams<f64>> = (0..7).map(|_| train_local_lr(&start, &data.rows, 5, 0.3).unwrap().params).collect();
    let items: Vec<(&ModelParams<f64>, u64)> = trained.iter().map(|p| (p, 40)).collect();
    let avg = fedavg_aggregate(&items).unwrap();
    for (a, b) in avg.coords().zip(solo.coords()) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}
