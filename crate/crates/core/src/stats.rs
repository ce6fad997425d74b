//! Correlation and traffic-curve comparison.

use thiserror::Error;

use crate::deviceflow::compile::step_areas;
use crate::deviceflow::RateFunctionSpec;
use crate::scalar::Scalar;
use crate::time::Millis;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: a series has zero variance")]
    ZeroVariance,
    #[error("no dispatch events in the window")]
    EmptyWindow,
}

/// Sample Pearson correlation.
pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Result<T, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooShort(a.len()));
    }
    let n = T::of_usize(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == T::zero() || sbb == T::zero() {
        return Err(StatsError::ZeroVariance);
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// Counts falling in each `step`-wide bin of `[start, start + length)`.
pub fn bin_counts(events: &[(Millis, u64)], start: Millis, length: Millis, step: Millis) -> Vec<u64> {
    let step = step.as_u64().max(1);
    let n = length.as_u64().div_ceil(step) as usize;
    let mut bins = vec![0u64; n];
    for &(t, c) in events {
        if t < start || t >= start + length {
            continue;
        }
        bins[((t - start).as_u64() / step) as usize] += c;
    }
    bins
}

/// Pearson correlation between the per-step area of `rate` (domain mapped
/// onto `[start, start + length)`) and the dispatched counts per step.
///
/// A flat target has no variance; it then counts as a perfect match when
/// every bin is within one message of its share, and as
/// [`StatsError::ZeroVariance`] otherwise.
pub fn curve_fidelity(
    rate: &RateFunctionSpec,
    domain: [f64; 2],
    start: Millis,
    length: Millis,
    step: Millis,
    dispatches: &[(Millis, u64)],
) -> Result<f64, StatsError> {
    let actual = bin_counts(dispatches, start, length, step);
    let total: u64 = actual.iter().sum();
    if total == 0 {
        return Err(StatsError::EmptyWindow);
    }
    let areas = step_areas(rate, domain, length, step);
    let area_sum: f64 = areas.iter().sum();
    let target: Vec<f64> = areas.iter().map(|a| a / area_sum * total as f64).collect();
    let actual: Vec<f64> = actual.iter().map(|&c| c as f64).collect();
    match pearson(&target, &actual) {
        Err(StatsError::ZeroVariance) => {
            let flat = target.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-9 * w[0].abs().max(1.0));
            if flat && target.iter().zip(&actual).all(|(t, a)| (t - a).abs() <= 1.0) {
                Ok(1.0)
            } else {
                Err(StatsError::ZeroVariance)
            }
        }
        other => other,
    }
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deviceflow::RateFn;

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 4.0, 7.0];
        assert!((pearson::<f64>(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        // Hand-computed: means 3.5 and 2.5; Σdxdy = 9, Σdx² = 21, Σdy² = 5.
        let b = [2.0, 1.0, 3.0, 4.0];
        let want = 9.0 / (21.0f64.sqrt() * 5.0f64.sqrt());
        assert!((pearson(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((pearson(&[1.0f32, 2.0, 4.0, 7.0], &[2.0, 1.0, 3.0, 4.0]).unwrap() as f64 - want).abs() < 1e-6);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::ZeroVariance));
        assert_eq!(pearson(&[1.0], &[1.0]), Err(StatsError::TooShort(1)));
        assert_eq!(pearson(&[1.0, 2.0], &[1.0]), Err(StatsError::LengthMismatch(2, 1)));
    }

    #[test]
    fn flat_curve_replay() {
        let rate = RateFunctionSpec::single(0.0, 10.0, RateFn::Constant { value: 1.0 });
        let ev: Vec<(Millis, u64)> = (0..10).map(|i| (Millis(i * 1000), 100 + (i % 2))).collect();
        let r = curve_fidelity(&rate, [0.0, 10.0], Millis::ZERO, Millis(10_000), Millis(1000), &ev).unwrap();
        assert_eq!(r, 1.0);
        let skewed: Vec<(Millis, u64)> = (0..10).map(|i| (Millis(i * 1000), 100 + 5 * (i % 2))).collect();
        let r = curve_fidelity(&rate, [0.0, 10.0], Millis::ZERO, Millis(10_000), Millis(1000), &skewed);
        assert_eq!(r, Err(StatsError::ZeroVariance));
        assert_eq!(
            curve_fidelity(&rate, [0.0, 10.0], Millis::ZERO, Millis(10_000), Millis(1000), &[]),
            Err(StatsError::EmptyWindow)
        );
    }

    #[test]
    fn binning() {
        let ev = [(Millis(0), 1), (Millis(999), 2), (Millis(1000), 3), (Millis(5000), 9), (Millis(2999), 4)];
        assert_eq!(bin_counts(&ev, Millis::ZERO, Millis(3000), Millis(1000)), vec![3, 3, 4]);
        assert_eq!(std_dev(&[1.0, 3.0]), Some(1.0));
    }
}
