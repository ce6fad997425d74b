//! Cloud side: object store, message buffer, aggregation triggers and FedAvg.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deviceflow::{PayloadRef, ShelfMessage};
use crate::scalar::Scalar;
use crate::time::{secs, Millis};
use crate::workload::{Evaluation, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("client {index} has dimension {got}, expected {want}")]
    DimensionMismatch { index: usize, got: usize, want: usize },
}

/// When the cloud merges buffered results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationTrigger {
    /// Fires as soon as the buffered sample total reaches `samples`,
    /// consuming the whole buffer.
    SampleThreshold { samples: u64 },
    /// Fires at every multiple of `period` after the task starts, if anything
    /// is buffered.
    Scheduled {
        #[serde(rename = "period_s", with = "secs")]
        period: Millis,
    },
}

impl AggregationTrigger {
    pub fn violations(&self) -> Vec<String> {
        match self {
            AggregationTrigger::SampleThreshold { samples: 0 } => vec!["samples must be at least 1".into()],
            AggregationTrigger::Scheduled { period } if *period == Millis::ZERO => vec!["period_s must be positive".into()],
            _ => Vec::new(),
        }
    }
}

/// Payloads uploaded by devices, addressed by [`PayloadRef`].
#[derive(Debug, Default)]
pub struct ObjectStore {
    objects: HashMap<PayloadRef, ModelParams<f64>>,
    next: u64,
}

impl ObjectStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, params: ModelParams<f64>) -> PayloadRef {
        let r = PayloadRef(self.next);
        self.next += 1;
        self.objects.insert(r, params);
        r
    }

    pub fn take(&mut self, r: PayloadRef) -> Option<ModelParams<f64>> {
        self.objects.remove(&r)
    }

    pub fn remove(&mut self, r: PayloadRef) {
        self.objects.remove(&r);
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub version: u64,
    pub t: Millis,
    pub messages: u64,
    pub samples: u64,
    pub train_acc: Option<f64>,
    pub loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// End-of-task aggregation over leftovers.
    pub flush: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GlobalModel {
    pub version: u64,
    pub params: Option<ModelParams<f64>>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone)]
pub struct Buffered {
    pub device_id: u32,
    pub round: u32,
    pub sample_count: u64,
    pub params: Option<ModelParams<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceiveOutcome {
    Buffered,
    Corrupt,
}

/// Metrics of a freshly aggregated model.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ModelMetrics {
    pub train: Option<Evaluation>,
    pub test_acc: Option<f64>,
}

pub struct CloudService {
    trigger: AggregationTrigger,
    model: GlobalModel,
    buffer: Vec<Buffered>,
    buffered_samples: u64,
    corrupt: u64,
}

impl CloudService {
    pub fn new(trigger: AggregationTrigger) -> Self {
        Self { trigger, model: GlobalModel::default(), buffer: Vec::new(), buffered_samples: 0, corrupt: 0 }
    }

    pub fn trigger(&self) -> &AggregationTrigger {
        &self.trigger
    }

    pub fn model(&self) -> &GlobalModel {
        &self.model
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn buffered_samples(&self) -> u64 {
        self.buffered_samples
    }

    pub fn corrupt(&self) -> u64 {
        self.corrupt
    }

    /// Fetches the payload and buffers the message. A reference missing from
    /// the store marks the message corrupt and leaves the buffer unchanged.
    pub fn receive_message(&mut self, msg: &ShelfMessage, store: &mut ObjectStore) -> ReceiveOutcome {
        let params = match msg.payload_ref {
            None => None,
            Some(r) => match store.take(r) {
                Some(p) => Some(p),
                None => {
                    warn!("task {}: dangling payload {:?} from device {}", msg.task_id, r, msg.device_id);
                    self.corrupt += 1;
                    return ReceiveOutcome::Corrupt;
                }
            },
        };
        self.buffered_samples += msg.sample_count;
        self.buffer.push(Buffered { device_id: msg.device_id, round: msg.round, sample_count: msg.sample_count, params });
        ReceiveOutcome::Buffered
    }

    /// Whether the trigger fires now. `at_boundary` marks a scheduled tick.
    pub fn should_fire(&self, at_boundary: bool) -> bool {
        match self.trigger {
            AggregationTrigger::SampleThreshold { samples } => !self.buffer.is_empty() && self.buffered_samples >= samples,
            AggregationTrigger::Scheduled { .. } => at_boundary && !self.buffer.is_empty(),
        }
    }

    /// Aggregates if the trigger fires, consuming the whole buffer.
    pub fn maybe_aggregate(
        &mut self,
        now: Millis,
        at_boundary: bool,
        eval: impl FnOnce(&ModelParams<f64>, &[Buffered]) -> ModelMetrics,
    ) -> Result<Option<&HistoryEntry>, CloudError> {
        if !self.should_fire(at_boundary) {
            return Ok(None);
        }
        self.aggregate(now, false, eval).map(Some)
    }

    /// End-of-task aggregation over whatever is left, if anything.
    pub fn flush_aggregate(
        &mut self,
        now: Millis,
        eval: impl FnOnce(&ModelParams<f64>, &[Buffered]) -> ModelMetrics,
    ) -> Result<Option<&HistoryEntry>, CloudError> {
        if self.buffer.is_empty() {
            return Ok(None);
        }
        self.aggregate(now, true, eval).map(Some)
    }

    fn aggregate(
        &mut self,
        now: Millis,
        flush: bool,
        eval: impl FnOnce(&ModelParams<f64>, &[Buffered]) -> ModelMetrics,
    ) -> Result<&HistoryEntry, CloudError> {
        let batch = std::mem::take(&mut self.buffer);
        let samples = std::mem::take(&mut self.buffered_samples);
        let items: Vec<(&ModelParams<f64>, u64)> =
            batch.iter().filter_map(|b| b.params.as_ref().map(|p| (p, b.sample_count))).collect();
        if !items.is_empty() {
            self.model.params = Some(fedavg_aggregate(&items)?);
        }
        let metrics = match &self.model.params {
            Some(p) => eval(p, &batch),
            None => ModelMetrics::default(),
        };
        self.model.version += 1;
        self.model.history.push(HistoryEntry {
            version: self.model.version,
            t: now,
            messages: batch.len() as u64,
            samples,
            train_acc: metrics.train.map(|e| e.accuracy),
            loss: metrics.train.map(|e| e.loss),
            test_acc: metrics.test_acc,
            flush,
        });
        Ok(self.model.history.last().expect("just pushed"))
    }
}

/// Sample-weighted mean `Σ (n_k / Σn)·w_k`. With all counts zero every
/// client gets the same weight.
pub fn fedavg_aggregate<T: Scalar>(items: &[(&ModelParams<T>, u64)]) -> Result<ModelParams<T>, CloudError> {
    let (first, _) = items.first().ok_or(CloudError::Empty)?;
    let dim = first.dim();
    for (index, (p, _)) in items.iter().enumerate() {
        if p.dim() != dim {
            return Err(CloudError::DimensionMismatch { index, got: p.dim(), want: dim });
        }
    }
    let total: u128 = items.iter().map(|(_, n)| *n as u128).sum();
    let weights: Vec<T> = if total == 0 {
        warn!("all sample counts are zero; averaging {} clients uniformly", items.len());
        vec![T::of(1.0 / items.len() as f64); items.len()]
    } else {
        items.iter().map(|(_, n)| T::of(*n as f64 / total as f64)).collect()
    };
    let mut out = ModelParams::zeros(dim);
    for ((p, _), &w) in items.iter().zip(&weights) {
        for (o, &v) in out.weights.iter_mut().zip(&p.weights) {
            *o += w * v;
        }
        out.bias += w * p.bias;
    }
    // Rounding can push a coordinate just past the client range.
    for j in 0..=dim {
        let coord = |p: &ModelParams<T>| if j < dim { p.weights[j] } else { p.bias };
        let lo = items.iter().map(|(p, _)| coord(p)).fold(T::infinity(), T::min);
        let hi = items.iter().map(|(p, _)| coord(p)).fold(T::neg_infinity(), T::max);
        let slot: &mut T = if j < dim { &mut out.weights[j] } else { &mut out.bias };
        *slot = slot.max(lo).min(hi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn p(w: &[f64], b: f64) -> ModelParams<f64> {
        ModelParams { weights: w.to_vec(), bias: b }
    }

    fn msg(device_id: u32, sample_count: u64, payload_ref: Option<PayloadRef>) -> ShelfMessage {
        ShelfMessage {
            task_id: Arc::from("t"),
            round: 1,
            device_id,
            grade: Arc::from("High"),
            sample_count,
            payload_ref,
            emit_time: Millis::ZERO,
        }
    }

    #[test]
    fn fedavg_examples() {
        let a = p(&[1.0, 3.0], 0.0);
        let b = p(&[3.0, 1.0], 0.0);
        assert_eq!(fedavg_aggregate(&[(&a, 5), (&b, 5)]).unwrap(), p(&[2.0, 2.0], 0.0));
        assert_eq!(fedavg_aggregate(&[(&a, 9)]).unwrap(), a);
        assert_eq!(fedavg_aggregate(&[(&a, 0), (&b, 0)]).unwrap(), p(&[2.0, 2.0], 0.0));

        let c = p(&[-2.0, 0.5], 4.0);
        let got = fedavg_aggregate(&[(&a, 1), (&b, 2), (&c, 7)]).unwrap();
        let want = [(1.0 + 6.0 - 14.0) / 10.0, (3.0 + 2.0 + 3.5) / 10.0];
        for (g, w) in got.weights.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((got.bias - 2.8).abs() < 1e-12);

        let short = p(&[1.0], 0.0);
        assert_eq!(
            fedavg_aggregate(&[(&a, 1), (&short, 1)]),
            Err(CloudError::DimensionMismatch { index: 1, got: 1, want: 2 })
        );
        assert_eq!(fedavg_aggregate::<f64>(&[]), Err(CloudError::Empty));
    }

    #[test]
    fn fedavg_in_f32() {
        let a = ModelParams { weights: vec![1.0f32, 3.0], bias: 1.0 };
        let b = ModelParams { weights: vec![3.0f32, 1.0], bias: 1.0 };
        assert_eq!(fedavg_aggregate(&[(&a, 1), (&b, 1)]).unwrap().weights, vec![2.0f32, 2.0]);
    }

    #[test]
    fn receive_and_threshold() {
        let mut store = ObjectStore::new();
        let mut cloud = CloudService::new(AggregationTrigger::SampleThreshold { samples: 100 });
        let r = store.put(p(&[1.0], 0.0));
        assert_eq!(cloud.receive_message(&msg(0, 99, Some(r)), &mut store), ReceiveOutcome::Buffered);
        assert_eq!(cloud.buffer_len(), 1);
        assert!(cloud.maybe_aggregate(Millis(1), false, |_, _| ModelMetrics::default()).unwrap().is_none());

        assert_eq!(cloud.receive_message(&msg(1, 5, Some(PayloadRef(77))), &mut store), ReceiveOutcome::Corrupt);
        assert_eq!((cloud.buffer_len(), cloud.corrupt()), (1, 1));

        let r = store.put(p(&[3.0], 0.0));
        cloud.receive_message(&msg(2, 51, Some(r)), &mut store);
        let h = cloud.maybe_aggregate(Millis(2), false, |_, _| ModelMetrics::default()).unwrap().unwrap().clone();
        assert_eq!((h.version, h.messages, h.samples, h.flush), (1, 2, 150, false));
        assert_eq!(cloud.buffer_len(), 0);
    }

    #[test]
    fn sample_totals() {
        let mut store = ObjectStore::new();
        let mut cloud = CloudService::new(AggregationTrigger::SampleThreshold { samples: u64::MAX });
        for i in 0..100 {
            let r = store.put(p(&[0.0], 0.0));
            cloud.receive_message(&msg(i, i as u64, Some(r)), &mut store);
        }
        assert_eq!(cloud.buffered_samples(), (0..100).sum::<u64>());
    }

    #[test]
    fn scheduled_trigger() {
        let mut store = ObjectStore::new();
        let mut cloud = CloudService::new(AggregationTrigger::Scheduled { period: Millis(1000) });
        assert!(cloud.maybe_aggregate(Millis(1000), true, |_, _| ModelMetrics::default()).unwrap().is_none());
        assert_eq!(cloud.model().version, 0);
        let r = store.put(p(&[1.0], 0.0));
        cloud.receive_message(&msg(0, 3, Some(r)), &mut store);
        assert!(cloud.maybe_aggregate(Millis(1500), false, |_, _| ModelMetrics::default()).unwrap().is_none());
        assert!(cloud.maybe_aggregate(Millis(2000), true, |_, _| ModelMetrics::default()).unwrap().is_some());
        assert_eq!(cloud.model().version, 1);
        assert!(cloud.flush_aggregate(Millis(2500), |_, _| ModelMetrics::default()).unwrap().is_none());
    }
}
