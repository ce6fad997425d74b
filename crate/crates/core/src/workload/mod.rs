//! Federated-learning workload: logistic regression, CTR data and partitioning.

pub mod data;
pub mod lr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use data::{
    generate_synthetic_ctr, hash_feature, ingest_csv, partition, CsvSchema, PartitionSpec, SyntheticCtrConfig,
};
pub use lr::{evaluate, loss_and_gradient, predict, sigmoid, train_local_lr, Evaluation, TrainOutcome};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("too few rows: {rows} rows for {clients} clients")]
    TooFewRows { rows: usize, clients: usize },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("{path}: line {line}: {message}")]
    MalformedRow { path: String, line: u64, message: String },
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
}

/// Logistic-regression parameters: dense weights plus a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { weights: vec![T::zero(); dim], bias: T::zero() }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    /// Coordinates in a fixed order: weights, then bias.
    pub fn coords(&self) -> impl Iterator<Item = T> + '_ {
        self.weights.iter().copied().chain(std::iter::once(self.bias))
    }
}

/// One labelled example with sparse features `(index, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub features: Vec<(u32, T)>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub dim: usize,
    pub rows: Vec<Example<T>>,
    /// Per-row device identifiers when the source declares them.
    pub device_ids: Option<Vec<String>>,
    /// Generating parameters, for synthetic data.
    pub truth: Option<ModelParams<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn positive_fraction(&self) -> f64 {
        positive_fraction(&self.rows)
    }
}

/// The local data of one simulated device.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub device_id: u32,
    pub rows: Vec<Example<T>>,
}

impl<T> ClientDataset<T> {
    pub fn positive_fraction(&self) -> f64 {
        positive_fraction(&self.rows)
    }
}

pub fn positive_fraction<T>(rows: &[Example<T>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.label).count() as f64 / rows.len() as f64
}
