//! Discretizes a time-interval strategy into time points.
//!
//! The pending message count is matched to the area under the rate curve.
//! The curve's domain is stretched over the dispatch interval, cut into steps
//! of width `h`, and each step receives a share of the messages proportional
//! to its area. Shares are rounded with the largest-remainder method so the
//! plan always sums to the pending count.

use log::debug;
use serde::Serialize;
use thiserror::Error;

use super::strategy::RateFunctionSpec;
use crate::scalar::Scalar;
use crate::time::Millis;

/// Subintervals of the composite trapezoid rule per step.
pub const TRAPEZOID_SUBSAMPLES: usize = 128;
pub const DEFAULT_STEP: Millis = Millis(1000);
pub const MIN_STEP: Millis = Millis(100);

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("degenerate rate function: total area is zero with {pending} pending messages")]
    Degenerate { pending: u64 },
    #[error("rate function is invalid on its domain: {0}")]
    InvalidRate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanPoint {
    /// Offset from the interval start.
    pub offset: Millis,
    pub count: u64,
    pub p_fail: f64,
    pub discard: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompiledDispatchPlan {
    pub points: Vec<PlanPoint>,
    pub total: u64,
    pub step: Millis,
}

impl CompiledDispatchPlan {
    pub fn counts(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.count).collect()
    }
}

/// Composite trapezoid rule with `n` uniform subintervals.
pub fn trapezoid<T: Scalar>(f: impl Fn(T) -> T, a: T, b: T, n: usize) -> T {
    let h = (b - a) / T::of_usize(n);
    let mut acc = (f(a) + f(b)) / T::of(2.0);
    for i in 1..n {
        acc += f(a + h * T::of_usize(i));
    }
    acc * h
}

/// Splits `total` into integer parts proportional to `weights`. Parts sum to
/// `total` exactly; leftover units go to the largest fractional remainders,
/// earlier index first on ties.
pub fn largest_remainder(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut parts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    // Float rounding can overshoot by a unit in pathological cases; trim from the smallest remainders.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.partial_cmp(&ri).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    if assigned <= total {
        let mut left = total - assigned;
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            parts[i] += 1;
            left -= 1;
        }
    } else {
        let mut excess = assigned - total;
        for &i in order.iter().rev().cycle() {
            if excess == 0 {
                break;
            }
            if parts[i] > 0 {
                parts[i] -= 1;
                excess -= 1;
            }
        }
    }
    parts
}

/// Per-step areas of `rate` after mapping `[a, b]` onto `[0, length]`.
pub fn step_areas(rate: &RateFunctionSpec, domain: [f64; 2], length: Millis, step: Millis) -> Vec<f64> {
    let [a, b] = domain;
    let len = length.as_u64() as f64;
    let f = |t: f64| rate.eval(t).unwrap_or(0.0);
    let n_steps = length.as_u64().div_ceil(step.as_u64());
    (0..n_steps)
        .map(|j| {
            let s0 = (j * step.as_u64()) as f64;
            let s1 = (((j + 1) * step.as_u64()).min(length.as_u64())) as f64;
            let t0 = a + (b - a) * s0 / len;
            let t1 = a + (b - a) * s1 / len;
            trapezoid(f, t0, t1, TRAPEZOID_SUBSAMPLES)
        })
        .collect()
}

fn compile_with_step(
    rate: &RateFunctionSpec,
    domain: [f64; 2],
    length: Millis,
    step: Millis,
    pending: u64,
    p_fail: f64,
    discard: u64,
) -> Result<CompiledDispatchPlan, CompileError> {
    let areas = step_areas(rate, domain, length, step);
    let total_area: f64 = areas.iter().sum();
    if !(total_area > 0.0) {
        return Err(CompileError::Degenerate { pending });
    }
    let counts = largest_remainder(pending, &areas);
    let points = counts
        .into_iter()
        .enumerate()
        .map(|(j, count)| PlanPoint {
            offset: Millis(j as u64 * step.as_u64()),
            count,
            p_fail,
            discard,
        })
        .collect();
    Ok(CompiledDispatchPlan { points, total: pending, step })
}

/// Compiles a time-interval strategy for `pending` messages.
///
/// The step starts at one second and is halved (floor 100 ms) while any step
/// would carry more than `capacity_per_sec * h` messages. Whatever still
/// exceeds capacity at the floor is left to pacing spillover at execution.
pub fn compile_time_interval(
    rate: &RateFunctionSpec,
    domain: [f64; 2],
    length: Millis,
    capacity_per_sec: u64,
    pending: u64,
    p_fail: f64,
    discard: u64,
) -> Result<CompiledDispatchPlan, CompileError> {
    if pending == 0 {
        return Ok(CompiledDispatchPlan { points: vec![], total: 0, step: DEFAULT_STEP });
    }
    let problems = rate.violations(domain[0], domain[1]);
    if let Some(p) = problems.into_iter().next() {
        return Err(CompileError::InvalidRate(p));
    }
    let mut step = DEFAULT_STEP.min(length.max(Millis(1)));
    loop {
        let plan = compile_with_step(rate, domain, length, step, pending, p_fail, discard)?;
        let limit = capacity_per_sec as f64 * step.as_secs_f64();
        let peak = plan.points.iter().map(|p| p.count).max().unwrap_or(0);
        if peak as f64 <= limit || step <= MIN_STEP {
            if peak as f64 > limit {
                debug!("step at floor {step}; peak {peak} exceeds capacity {limit}, pacing will spill");
            }
            return Ok(plan);
        }
        let next = Millis((step.as_u64() / 2).max(MIN_STEP.as_u64()));
        debug!("peak {peak} exceeds capacity {limit} at step {step}; retrying with {next}");
        step = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deviceflow::strategy::RateFn;
    use proptest::prelude::*;

    #[test]
    fn constant_rate_is_uniform() {
        let rate = RateFunctionSpec::single(0.0, 10.0, RateFn::Constant { value: 1.0 });
        let plan = compile_time_interval(&rate, [0.0, 10.0], Millis::from_secs(10), 700, 1000, 0.0, 0).unwrap();
        assert_eq!(plan.counts(), vec![100; 10]);
        assert_eq!(plan.step, Millis(1000));
        let offsets: Vec<u64> = plan.points.iter().map(|p| p.offset.as_u64()).collect();
        assert_eq!(offsets, (0..10).map(|i| i * 1000).collect::<Vec<_>>());
    }

    #[test]
    fn zero_pending_gives_empty_plan() {
        let rate = RateFunctionSpec::single(0.0, 1.0, RateFn::SinPlus1);
        let plan = compile_time_interval(&rate, [0.0, 1.0], Millis(60_000), 700, 0, 0.0, 0).unwrap();
        assert!(plan.points.is_empty());
    }

    #[test]
    fn zero_area_is_degenerate() {
        let rate = RateFunctionSpec::single(0.0, 1.0, RateFn::Constant { value: 0.0 });
        let err = compile_time_interval(&rate, [0.0, 1.0], Millis(10_000), 700, 5, 0.0, 0).unwrap_err();
        assert_eq!(err, CompileError::Degenerate { pending: 5 });
    }

    #[test]
    fn step_stays_at_one_second_when_it_fits() {
        let rate = RateFunctionSpec::single(0.0, 1.0, RateFn::Constant { value: 1.0 });
        let plan = compile_time_interval(&rate, [0.0, 1.0], Millis(2000), 700, 1400, 0.0, 0).unwrap();
        assert_eq!(plan.step, Millis(1000));
        assert_eq!(plan.counts(), vec![700; 2]);
    }

    #[test]
    fn uniform_overload_halves_down_to_floor() {
        // Refining a flat curve never lowers its density, so the loop runs to the floor.
        let rate = RateFunctionSpec::single(0.0, 1.0, RateFn::Constant { value: 1.0 });
        let plan = compile_time_interval(&rate, [0.0, 1.0], Millis(1000), 700, 1400, 0.0, 0).unwrap();
        assert_eq!(plan.step, MIN_STEP);
        assert_eq!(plan.counts(), vec![140; 10]);
    }

    #[test]
    fn steep_curve_stops_at_floor() {
        let rate = RateFunctionSpec::single(0.0, 3.0, RateFn::ExpBase { base: 10.0 });
        let plan = compile_time_interval(&rate, [0.0, 3.0], Millis(60_000), 700, 10_000, 0.0, 0).unwrap();
        assert_eq!(plan.step, MIN_STEP);
        assert_eq!(plan.counts().iter().sum::<u64>(), 10_000);
    }

    #[test]
    fn trapezoid_is_exact_for_linear_and_close_for_smooth() {
        assert!((trapezoid(|t: f64| 2.0 * t + 1.0, 0.0, 3.0, 4) - 12.0).abs() < 1e-12);
        let sin = trapezoid(|t: f64| t.sin(), 0.0, std::f64::consts::PI, 128);
        // Closed form of the rule for sin on [0, pi]: h / tan(h / 2).
        let h = std::f64::consts::PI / 128.0;
        assert!((sin - h / (h / 2.0).tan()).abs() < 1e-12);
        assert!((sin - 2.0).abs() < 2e-4);
        let sin32 = trapezoid(|t: f32| t.sin(), 0.0, std::f32::consts::PI, 128);
        assert!((sin32 - 2.0).abs() < 1e-3);
    }

    #[test]
    fn largest_remainder_breaks_ties_by_earlier_index() {
        assert_eq!(largest_remainder(2, &[1.0, 1.0, 1.0]), vec![1, 1, 0]);
        assert_eq!(largest_remainder(10, &[0.0, 0.0]), vec![0, 0]);
        assert_eq!(largest_remainder(7, &[1.0, 2.0, 4.0]), vec![1, 2, 4]);
    }

    proptest! {
        #[test]
        fn largest_remainder_sums_exactly(total in 0u64..100_000, weights in prop::collection::vec(0.0f64..1e6, 1..200)) {
            let parts = largest_remainder(total, &weights);
            if weights.iter().sum::<f64>() > 0.0 {
                prop_assert_eq!(parts.iter().sum::<u64>(), total);
                // each part within one unit of its quota
                let sum: f64 = weights.iter().sum();
                for (p, w) in parts.iter().zip(&weights) {
                    let q = total as f64 * w / sum;
                    prop_assert!((*p as f64 - q).abs() < 1.0 + 1e-6);
                }
            }
        }

        #[test]
        fn compiled_plans_are_exact(pending in 0u64..50_000, secs in 1u64..120, sigma in 0.3f64..3.0) {
            let rate = RateFunctionSpec::single(-4.0, 4.0, RateFn::NormalPdf { mu: 0.0, sigma });
            let plan = compile_time_interval(&rate, [-4.0, 4.0], Millis::from_secs(secs), 700, pending, 0.0, 0).unwrap();
            prop_assert_eq!(plan.counts().iter().sum::<u64>(), pending);
            prop_assert!(plan.points.windows(2).all(|w| w[0].offset < w[1].offset));
        }
    }
}
