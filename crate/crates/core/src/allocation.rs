//! Splitting each grade's devices between logical simulation and phones.
//!
//! With `x` devices of a grade simulated logically, the grade needs
//! `ceil(k·x / f)·α` on bundles and `ceil((N − q − x) / m)·β + λ` on phones
//! (0 when nothing lands on phones). A task lasts as long as its slowest term.

use serde::Serialize;
use thiserror::Error;

use crate::model::{Demand, GradeSpec, TaskSpec};
use crate::time::Millis;

/// Upper bound on the number of vectors [`brute_force_allocation`] will visit.
pub const BRUTE_FORCE_GUARD: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocationError {
    #[error("no logical capacity for grade {0}")]
    NoLogicalCapacity(String),
    #[error("no phone capacity for grade {0}")]
    NoPhoneCapacity(String),
    #[error("grade {0} unhostable")]
    Unhostable(String),
    #[error("grade {grade}: {x} logical devices exceed N - q = {max}")]
    OverAssigned { grade: String, x: u64, max: u64 },
    #[error("grade {0}: benchmarking exceeds demand")]
    BenchmarkExceedsDemand(String),
    #[error("allocation vector has {got} entries for {want} grades")]
    LengthMismatch { got: usize, want: usize },
    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("search space of {0} vectors exceeds the brute-force guard")]
    GuardExceeded(u128),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradeDemand {
    pub grade: GradeSpec,
    pub demand: Demand,
}

impl GradeDemand {
    pub fn new(grade: GradeSpec, n: u64, q: u64) -> Self {
        Self { grade, demand: Demand { n, q } }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AllocationInput {
    pub grades: Vec<GradeDemand>,
}

impl AllocationInput {
    pub fn new(grades: Vec<GradeDemand>) -> Self {
        Self { grades }
    }

    /// The task's own grades and demands.
    pub fn from_spec(spec: &TaskSpec) -> Self {
        Self::new(spec.grade_demands().map(|(g, d)| GradeDemand { grade: g.clone(), demand: *d }).collect())
    }

    fn check(&self) -> Result<(), AllocationError> {
        for g in &self.grades {
            if g.demand.q > g.demand.n {
                return Err(AllocationError::BenchmarkExceedsDemand(g.grade.grade_id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AllocationPlan {
    pub x: Vec<u64>,
    #[serde(rename = "t_logical_ms")]
    pub t_logical: Millis,
    #[serde(rename = "t_device_ms")]
    pub t_device: Millis,
    #[serde(rename = "t_total_ms")]
    pub t_total: Millis,
}

const INF: u128 = u128::MAX;

fn ceil_div(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

fn to_millis(v: u128) -> Millis {
    Millis(v.min(u64::MAX as u128) as u64)
}

/// Logical term for one grade; `INF` when `x > 0` but no slot exists.
fn logical_raw(g: &GradeSpec, x: u64) -> u128 {
    if x == 0 {
        0
    } else if g.f < g.k || g.k == 0 {
        INF
    } else {
        ceil_div(g.k as u128 * x as u128, g.f as u128) * g.alpha.0 as u128
    }
}

/// Phone term for one grade; `INF` when phone work exists but no phone does.
fn device_raw(g: &GradeSpec, on_phones: u64) -> u128 {
    if on_phones == 0 {
        0
    } else if g.m == 0 {
        INF
    } else {
        ceil_div(on_phones as u128, g.m as u128) * g.beta.0 as u128 + g.lambda.0 as u128
    }
}

pub fn logical_term(g: &GradeSpec, x: u64) -> Result<Millis, AllocationError> {
    match logical_raw(g, x) {
        INF => Err(AllocationError::NoLogicalCapacity(g.grade_id.clone())),
        v => Ok(to_millis(v)),
    }
}

pub fn device_term(g: &GradeSpec, demand: &Demand, x: u64) -> Result<Millis, AllocationError> {
    let on_phones = phone_count(g, demand, x)?;
    match device_raw(g, on_phones) {
        INF => Err(AllocationError::NoPhoneCapacity(g.grade_id.clone())),
        v => Ok(to_millis(v)),
    }
}

fn phone_count(g: &GradeSpec, demand: &Demand, x: u64) -> Result<u64, AllocationError> {
    let max = demand.computing();
    if x > max {
        return Err(AllocationError::OverAssigned { grade: g.grade_id.clone(), x, max });
    }
    Ok(max - x)
}

fn check_len<V>(grades: usize, x: &[V]) -> Result<(), AllocationError> {
    if grades != x.len() {
        return Err(AllocationError::LengthMismatch { got: x.len(), want: grades });
    }
    Ok(())
}

/// `T_l = max_i ceil(k_i·x_i / f_i)·α_i`.
pub fn logical_duration(grades: &[GradeSpec], x: &[u64]) -> Result<Millis, AllocationError> {
    check_len(grades.len(), x)?;
    grades.iter().zip(x).try_fold(Millis::ZERO, |acc, (g, &xi)| Ok(acc.max(logical_term(g, xi)?)))
}

/// `T_p = max_i ceil((N_i − q_i − x_i) / m_i)·β_i + λ_i`, a grade with no
/// phone work contributing 0.
pub fn device_duration(grades: &[GradeSpec], demand: &[Demand], x: &[u64]) -> Result<Millis, AllocationError> {
    check_len(grades.len(), x)?;
    check_len(grades.len(), demand)?;
    grades
        .iter()
        .zip(demand)
        .zip(x)
        .try_fold(Millis::ZERO, |acc, ((g, d), &xi)| Ok(acc.max(device_term(g, d, xi)?)))
}

/// Durations of an explicit allocation.
pub fn evaluate_allocation(input: &AllocationInput, x: &[u64]) -> Result<AllocationPlan, AllocationError> {
    input.check()?;
    check_len(input.grades.len(), x)?;
    let mut t_logical = Millis::ZERO;
    let mut t_device = Millis::ZERO;
    for (gd, &xi) in input.grades.iter().zip(x) {
        let d = device_term(&gd.grade, &gd.demand, xi)?;
        t_logical = t_logical.max(logical_term(&gd.grade, xi)?);
        t_device = t_device.max(d);
    }
    Ok(AllocationPlan { x: x.to_vec(), t_logical, t_device, t_total: t_logical.max(t_device) })
}

fn grade_cost(g: &GradeSpec, u: u64, x: u64) -> u128 {
    logical_raw(g, x).max(device_raw(g, u - x))
}

/// Smallest x in `[0, u]` whose logical term reaches the phone term.
fn crossing(g: &GradeSpec, u: u64) -> u64 {
    let (mut lo, mut hi) = (0u64, u);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if logical_raw(g, mid) >= device_raw(g, u - mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Largest x in `[0, u]` whose logical term stays within `t`.
fn max_logical_within(g: &GradeSpec, u: u64, t: u128) -> u64 {
    let (mut lo, mut hi) = (0u64, u);
    while lo < hi {
        let mid = hi - (hi - lo) / 2;
        if logical_raw(g, mid) <= t {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Minimizes `T = max(T_l, T_p)`; among minimizers maximizes `Σx`.
///
/// Grades decouple under the max: each grade's best achievable cost sits at
/// the crossing of its two monotone terms, the task optimum `T*` is the
/// largest of those, and every grade then takes the most logical devices
/// whose logical term fits under `T*`.
pub fn solve_allocation(input: &AllocationInput) -> Result<AllocationPlan, AllocationError> {
    input.check()?;
    let mut t_star = 0u128;
    for gd in &input.grades {
        let u = gd.demand.computing();
        let c = crossing(&gd.grade, u);
        let mut best = grade_cost(&gd.grade, u, c);
        if c > 0 {
            best = best.min(grade_cost(&gd.grade, u, c - 1));
        }
        if best == INF {
            return Err(AllocationError::Unhostable(gd.grade.grade_id.clone()));
        }
        t_star = t_star.max(best);
    }
    let x: Vec<u64> = input
        .grades
        .iter()
        .map(|gd| max_logical_within(&gd.grade, gd.demand.computing(), t_star))
        .collect();
    evaluate_allocation(input, &x)
}

/// Exhaustive search, ordered by (min T, max Σx, larger x in grade order).
/// Used as a test oracle.
pub fn brute_force_allocation(input: &AllocationInput) -> Result<AllocationPlan, AllocationError> {
    input.check()?;
    let sizes: Vec<u64> = input.grades.iter().map(|g| g.demand.computing() + 1).collect();
    let space = sizes.iter().try_fold(1u128, |acc, &s| acc.checked_mul(s as u128)).unwrap_or(u128::MAX);
    if space > BRUTE_FORCE_GUARD {
        return Err(AllocationError::GuardExceeded(space));
    }
    // Per-grade cost tables; INF marks an infeasible choice.
    let costs: Vec<Vec<u128>> = input
        .grades
        .iter()
        .map(|gd| {
            let u = gd.demand.computing();
            (0..=u).map(|x| grade_cost(&gd.grade, u, x)).collect()
        })
        .collect();
    let c = costs.len();
    if c == 0 {
        return evaluate_allocation(input, &[]);
    }
    let mut x = vec![0u64; c];
    let mut best: Option<(u128, u64, Vec<u64>)> = None;
    // prefix[i] = max cost over grades < i for the current x.
    let mut prefix = vec![0u128; c + 1];
    for i in 0..c {
        prefix[i + 1] = prefix[i].max(costs[i][0]);
    }
    loop {
        let t = prefix[c];
        if t != INF {
            let sum: u64 = x.iter().sum();
            let better = match &best {
                None => true,
                Some((bt, bs, bx)) => t < *bt || (t == *bt && (sum > *bs || (sum == *bs && x > *bx))),
            };
            if better {
                best = Some((t, sum, x.clone()));
            }
        }
        // Odometer increment, last grade fastest.
        let mut i = c;
        loop {
            if i == 0 {
                let (_, _, bx) = best.ok_or_else(|| {
                    let bad = input.grades.iter().zip(&costs).find(|(_, t)| t.iter().all(|&v| v == INF));
                    AllocationError::Unhostable(bad.map_or_else(String::new, |(g, _)| g.grade.grade_id.clone()))
                })?;
                return evaluate_allocation(input, &bx);
            }
            i -= 1;
            x[i] += 1;
            if x[i] < sizes[i] {
                break;
            }
            x[i] = 0;
        }
        for j in i..c {
            prefix[j + 1] = prefix[j].max(costs[j][x[j] as usize]);
        }
    }
}

/// The plan a task runs with on its declared resources: the override when
/// present, the optimum otherwise.
pub fn plan_for_spec(spec: &TaskSpec) -> Result<AllocationPlan, AllocationError> {
    let input = AllocationInput::from_spec(spec);
    match spec.override_vector() {
        Some(x) => evaluate_allocation(&input, &x),
        None => solve_allocation(&input),
    }
}

/// Fixed share of each grade on logical simulation:
/// `x_i = round(ratio·(N_i − q_i))`, halves rounding up.
pub fn ratio_allocation(input: &AllocationInput, ratio: f64) -> Result<AllocationPlan, AllocationError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(AllocationError::InvalidRatio(ratio));
    }
    input.check()?;
    let x: Vec<u64> = input
        .grades
        .iter()
        .map(|gd| {
            let u = gd.demand.computing();
            ((ratio * u as f64 + 0.5).floor() as u64).min(u)
        })
        .collect();
    evaluate_allocation(input, &x)
}
