//! User-facing dispatch strategy definitions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::time::{secs, Millis};

pub const DEFAULT_CAPACITY_PER_SEC: u64 = 700;

fn default_capacity() -> u64 {
    DEFAULT_CAPACITY_PER_SEC
}

/// How time offsets in a rule-based strategy are anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeBase {
    /// Offset from the instant the round's last emission is shelved.
    #[default]
    RelativeToRoundEnd,
    /// Virtual-clock instant.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimePointSpec {
    #[serde(rename = "at_s", with = "secs")]
    pub at: Millis,
    pub count: u64,
    #[serde(default)]
    pub p_fail: f64,
    #[serde(default)]
    pub discard: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DispatchStrategySpec {
    RealTimeAccumulated {
        thresholds: Vec<u64>,
        #[serde(default)]
        p_fail: f64,
        #[serde(default = "default_capacity")]
        capacity_per_sec: u64,
    },
    TimePoint {
        points: Vec<TimePointSpec>,
        #[serde(default)]
        time_base: TimeBase,
        #[serde(default = "default_capacity")]
        capacity_per_sec: u64,
    },
    TimeInterval {
        rate: RateFunctionSpec,
        domain: [f64; 2],
        #[serde(rename = "start_s", with = "secs")]
        start: Millis,
        #[serde(rename = "length_s", with = "secs")]
        length: Millis,
        #[serde(default)]
        time_base: TimeBase,
        #[serde(default)]
        p_fail: f64,
        #[serde(default)]
        discard_per_interval: u64,
        #[serde(default = "default_capacity")]
        capacity_per_sec: u64,
    },
}

impl Default for DispatchStrategySpec {
    /// Pass-through: every message is forwarded as soon as it is shelved.
    fn default() -> Self {
        DispatchStrategySpec::RealTimeAccumulated {
            thresholds: vec![1],
            p_fail: 0.0,
            capacity_per_sec: DEFAULT_CAPACITY_PER_SEC,
        }
    }
}

impl DispatchStrategySpec {
    pub fn capacity_per_sec(&self) -> u64 {
        match self {
            DispatchStrategySpec::RealTimeAccumulated { capacity_per_sec, .. }
            | DispatchStrategySpec::TimePoint { capacity_per_sec, .. }
            | DispatchStrategySpec::TimeInterval { capacity_per_sec, .. } => *capacity_per_sec,
        }
    }

    pub fn is_rule_based(&self) -> bool {
        !matches!(self, DispatchStrategySpec::RealTimeAccumulated { .. })
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let prob = |p: f64, what: &str, out: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{what} probability {p} outside [0,1]"));
            }
        };
        if self.capacity_per_sec() == 0 {
            out.push("capacity_per_sec must be at least 1".into());
        }
        match self {
            DispatchStrategySpec::RealTimeAccumulated { thresholds, p_fail, .. } => {
                if thresholds.is_empty() {
                    out.push("thresholds must be nonempty".into());
                }
                if thresholds.iter().any(|&t| t == 0) {
                    out.push("thresholds must be positive".into());
                }
                prob(*p_fail, "p_fail", &mut out);
            }
            DispatchStrategySpec::TimePoint { points, .. } => {
                for p in points {
                    prob(p.p_fail, "time point p_fail", &mut out);
                }
            }
            DispatchStrategySpec::TimeInterval { rate, domain, length, p_fail, .. } => {
                if !(domain[0] < domain[1]) || !domain.iter().all(|d| d.is_finite()) {
                    out.push(format!("domain [{}, {}] must satisfy a < b", domain[0], domain[1]));
                } else {
                    out.extend(rate.violations(domain[0], domain[1]));
                }
                if *length == Millis::ZERO {
                    out.push("interval length must be positive".into());
                }
                prob(*p_fail, "p_fail", &mut out);
            }
        }
        out
    }
}

/// A closed-form transmission-rate shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateFn {
    NormalPdf { mu: f64, sigma: f64 },
    SinPlus1,
    CosPlus1,
    /// `base^t`
    ExpBase { base: f64 },
    Constant { value: f64 },
    /// `c0 + c1 t + c2 t^2 + ...`
    Polynomial { coeffs: Vec<f64> },
}

impl RateFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            RateFn::NormalPdf { mu, sigma } => {
                let z = (t - mu) / sigma;
                (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
            }
            RateFn::SinPlus1 => t.sin() + 1.0,
            RateFn::CosPlus1 => t.cos() + 1.0,
            RateFn::ExpBase { base } => base.powf(t),
            RateFn::Constant { value } => *value,
            RateFn::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSegment {
    pub from: f64,
    pub to: f64,
    #[serde(rename = "fn")]
    pub func: RateFn,
}

/// Piecewise rate function `y = f(t)`. Segments are contiguous; at a shared
/// boundary the earlier segment wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateFunctionSpec {
    pub segments: Vec<RateSegment>,
}

impl RateFunctionSpec {
    pub fn single(from: f64, to: f64, func: RateFn) -> Self {
        Self { segments: vec![RateSegment { from, to, func }] }
    }

    pub fn eval(&self, t: f64) -> Option<f64> {
        self.segments
            .iter()
            .find(|s| s.from <= t && t <= s.to)
            .map(|s| s.func.eval(t))
    }

    /// Structural checks plus a sampled check that `f` is finite and
    /// nonnegative on `[a, b]`.
    pub fn violations(&self, a: f64, b: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.segments.is_empty() {
            out.push("rate function has no segments".into());
            return out;
        }
        for s in &self.segments {
            if !(s.from < s.to) {
                out.push(format!("segment [{}, {}] is empty", s.from, s.to));
            }
            if let RateFn::NormalPdf { sigma, .. } = s.func {
                if !(sigma > 0.0) {
                    out.push(format!("normal_pdf sigma {sigma} must be positive"));
                }
            }
            if let RateFn::ExpBase { base } = s.func {
                if !(base > 0.0) {
                    out.push(format!("exp_base base {base} must be positive"));
                }
            }
        }
        for w in self.segments.windows(2) {
            if w[0].to != w[1].from {
                out.push(format!("segments [{}, {}] and [{}, {}] are not contiguous", w[0].from, w[0].to, w[1].from, w[1].to));
            }
        }
        let lo = self.segments[0].from;
        let hi = self.segments[self.segments.len() - 1].to;
        if lo > a || hi < b {
            out.push(format!("segments cover [{lo}, {hi}] but the domain is [{a}, {b}]"));
        }
        if !out.is_empty() {
            return out;
        }
        const PROBES: usize = 4096;
        for i in 0..=PROBES {
            let t = a + (b - a) * i as f64 / PROBES as f64;
            match self.eval(t) {
                Some(y) if y.is_finite() && y >= 0.0 => {}
                Some(y) => {
                    out.push(format!("rate function is {y} at t={t}; must be finite and nonnegative"));
                    break;
                }
                None => {
                    out.push(format!("rate function undefined at t={t}"));
                    break;
                }
            }
        }
        out
    }
}
