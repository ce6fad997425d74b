//! Binary logistic regression trained by full-batch gradient descent.

use serde::Serialize;

use super::{Example, ModelParams, WorkloadError};
use crate::scalar::Scalar;

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn logit<T: Scalar>(params: &ModelParams<T>, features: &[(u32, T)]) -> Result<T, WorkloadError> {
    let mut z = params.bias;
    for &(i, v) in features {
        let w = params.weights.get(i as usize).ok_or(WorkloadError::DimensionMismatch {
            expected: params.dim(),
            got: i as usize + 1,
        })?;
        z += *w * v;
    }
    Ok(z)
}

/// `σ(w·x + b)`.
pub fn predict<T: Scalar>(params: &ModelParams<T>, features: &[(u32, T)]) -> Result<T, WorkloadError> {
    logit(params, features).map(sigmoid)
}

/// Mean binary cross-entropy and its gradient over `rows`.
pub fn loss_and_gradient<T: Scalar>(
    params: &ModelParams<T>,
    rows: &[Example<T>],
) -> Result<(T, ModelParams<T>), WorkloadError> {
    if rows.is_empty() {
        return Err(WorkloadError::EmptyDataset);
    }
    let mut grad = ModelParams::zeros(params.dim());
    let mut loss = T::zero();
    for row in rows {
        let z = logit(params, &row.features)?;
        let y = if row.label { T::one() } else { T::zero() };
        loss += softplus(z) - y * z;
        let err = sigmoid(z) - y;
        for &(i, v) in &row.features {
            grad.weights[i as usize] += err * v;
        }
        grad.bias += err;
    }
    let n = T::of_usize(rows.len());
    grad.weights.iter_mut().for_each(|g| *g /= n);
    grad.bias /= n;
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    /// Mean loss before the first epoch and after each epoch (`epochs + 1` entries).
    pub losses: Vec<T>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn final_loss(&self) -> T {
        *self.losses.last().expect("at least the initial loss")
    }
}

pub fn train_local_lr<T: Scalar>(
    params: &ModelParams<T>,
    rows: &[Example<T>],
    epochs: usize,
    lr: T,
) -> Result<TrainOutcome<T>, WorkloadError> {
    let mut p = params.clone();
    let mut losses = Vec::with_capacity(epochs + 1);
    for epoch in 0..epochs {
        let (loss, grad) = loss_and_gradient(&p, rows)?;
        if !loss.is_finite() {
            return Err(WorkloadError::NonFiniteLoss { epoch });
        }
        losses.push(loss);
        for (w, g) in p.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * *g;
        }
        p.bias -= lr * grad.bias;
    }
    let (loss, _) = loss_and_gradient(&p, rows)?;
    if !loss.is_finite() || !p.is_finite() {
        return Err(WorkloadError::NonFiniteLoss { epoch: epochs });
    }
    losses.push(loss);
    Ok(TrainOutcome { params: p, losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy with a positive prediction when `p > 0.5`, and mean cross-entropy.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, rows: &[Example<T>]) -> Result<Evaluation, WorkloadError> {
    if rows.is_empty() {
        return Err(WorkloadError::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut loss = T::zero();
    for row in rows {
        let z = logit(params, &row.features)?;
        let y = if row.label { T::one() } else { T::zero() };
        loss += softplus(z) - y * z;
        if (sigmoid(z) > T::of(0.5)) == row.label {
            correct += 1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / rows.len() as f64,
        loss: (loss / T::of_usize(rows.len())).as_f64(),
    })
}
