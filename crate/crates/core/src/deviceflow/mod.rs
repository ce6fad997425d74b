//! Device-behavior traffic control between edge emissions and the cloud.
//!
//! The [`Sorter`] files each incoming message onto the [`Shelf`] of its task.
//! A per-shelf [`Dispatcher`] releases shelved messages according to the
//! task's strategy, applies dropout and paces forwarding through a
//! [`Pacer`]. Shelves never share state, so tasks stay isolated.

pub mod compile;
pub mod strategy;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::Arc;

use log::{debug, warn};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use compile::{compile_time_interval, largest_remainder, CompileError, CompiledDispatchPlan, PlanPoint};
pub use strategy::{DispatchStrategySpec, RateFn, RateFunctionSpec, RateSegment, TimeBase, TimePointSpec};

use crate::time::Millis;

/// Key into a task's object store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PayloadRef(pub u64);

/// Edge-to-cloud notification that a device finished a round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShelfMessage {
    pub task_id: Arc<str>,
    pub round: u32,
    pub device_id: u32,
    pub grade: Arc<str>,
    pub sample_count: u64,
    pub payload_ref: Option<PayloadRef>,
    pub emit_time: Millis,
}

/// Per-task FIFO of pending messages.
#[derive(Debug, Default)]
pub struct Shelf {
    queue: VecDeque<ShelfMessage>,
    seen: HashSet<(u32, u32)>,
}

impl Shelf {
    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ShelfMessage> {
        self.queue.iter()
    }

    fn take_front(&mut self, n: usize) -> Vec<ShelfMessage> {
        let n = n.min(self.queue.len());
        self.queue.drain(..n).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub task_id: Arc<str>,
    pub round: u32,
    pub device_id: u32,
    pub at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SortOutcome {
    Shelved { shelf_len: usize },
    Duplicate,
}

/// Routes messages to shelves keyed by task id.
#[derive(Debug, Default)]
pub struct Sorter {
    shelves: BTreeMap<Arc<str>, Shelf>,
    rejections: Vec<Rejection>,
}

impl Sorter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to the task's shelf, creating it on first use. A second message
    /// with the same `(task, round, device)` is rejected and logged.
    pub fn sort_incoming(&mut self, msg: ShelfMessage) -> SortOutcome {
        let shelf = self.shelves.entry(msg.task_id.clone()).or_default();
        if !shelf.seen.insert((msg.round, msg.device_id)) {
            warn!("duplicate message task={} round={} device={}", msg.task_id, msg.round, msg.device_id);
            self.rejections.push(Rejection {
                task_id: msg.task_id,
                round: msg.round,
                device_id: msg.device_id,
                at: msg.emit_time,
            });
            return SortOutcome::Duplicate;
        }
        shelf.queue.push_back(msg);
        SortOutcome::Shelved { shelf_len: shelf.queue.len() }
    }

    pub fn shelf(&self, task_id: &str) -> Option<&Shelf> {
        self.shelves.get(task_id)
    }

    pub fn shelf_mut(&mut self, task_id: &str) -> Option<&mut Shelf> {
        self.shelves.get_mut(task_id)
    }

    pub fn shelf_ids(&self) -> impl Iterator<Item = &str> {
        self.shelves.keys().map(|k| k.as_ref())
    }

    pub fn rejections(&self) -> &[Rejection] {
        &self.rejections
    }
}

/// Sliding-window rate limiter: no 1000 ms window holds more than `capacity`
/// send instants. Sends are FIFO and never earlier than requested.
#[derive(Debug, Clone)]
pub struct Pacer {
    capacity: usize,
    recent: VecDeque<Millis>,
    last: Millis,
}

impl Pacer {
    pub const WINDOW: Millis = Millis(1000);

    pub fn new(capacity_per_sec: u64) -> Self {
        let capacity = capacity_per_sec.max(1) as usize;
        Self {
            capacity,
            recent: VecDeque::with_capacity(capacity.min(1 << 16)),
            last: Millis::ZERO,
        }
    }

    pub fn next_slot(&mut self, requested: Millis) -> Millis {
        let mut t = requested.max(self.last);
        if self.recent.len() == self.capacity {
            let oldest = self.recent.pop_front().expect("window is full");
            t = t.max(oldest + Self::WINDOW);
        }
        self.recent.push_back(t);
        self.last = t;
        t
    }
}

/// Bernoulli failure per message (`rng.random::<f64>() < p_fail`, in order),
/// then `discard_count` survivors removed uniformly without replacement.
/// Returns `(delivered, dropped)`; order within each side follows the input.
pub fn apply_dropout<M>(messages: Vec<M>, p_fail: f64, discard_count: u64, rng: &mut impl Rng) -> (Vec<M>, Vec<M>) {
    let mut survivors = Vec::with_capacity(messages.len());
    let mut dropped = Vec::new();
    for m in messages {
        if p_fail > 0.0 && rng.random::<f64>() < p_fail {
            dropped.push(m);
        } else {
            survivors.push(m);
        }
    }
    if discard_count == 0 || survivors.is_empty() {
        return (survivors, dropped);
    }
    let k = if discard_count as usize > survivors.len() {
        debug!("discard count {discard_count} clamped to {}", survivors.len());
        survivors.len()
    } else {
        discard_count as usize
    };
    let mut discard = vec![false; survivors.len()];
    for i in index::sample(rng, survivors.len(), k) {
        discard[i] = true;
    }
    let mut delivered = Vec::with_capacity(survivors.len() - k);
    for (m, d) in survivors.into_iter().zip(discard) {
        if d {
            dropped.push(m);
        } else {
            delivered.push(m);
        }
    }
    (delivered, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BatchKind {
    Dispatch,
    Flush,
}

/// Outcome of one release decision on a shelf.
#[derive(Debug)]
pub struct DispatchBatch {
    pub at: Millis,
    pub kind: BatchKind,
    /// Survivors with the instant each is forwarded to the cloud.
    pub forwarded: Vec<(Millis, ShelfMessage)>,
    pub dropped: Vec<ShelfMessage>,
    /// Requested but absent from the shelf.
    pub shortfall: u64,
}

/// A scheduled release, in absolute virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduledPoint {
    pub at: Millis,
    pub count: u64,
    pub p_fail: f64,
    pub discard: u64,
}

/// Executes one task's strategy against its shelf.
pub struct Dispatcher {
    strategy: DispatchStrategySpec,
    cursor: usize,
    pacer: Pacer,
    rng: ChaCha8Rng,
}

impl Dispatcher {
    pub fn new(strategy: DispatchStrategySpec, rng: ChaCha8Rng) -> Self {
        let pacer = Pacer::new(strategy.capacity_per_sec());
        Self { strategy, cursor: 0, pacer, rng }
    }

    pub fn strategy(&self) -> &DispatchStrategySpec {
        &self.strategy
    }

    fn release(&mut self, shelf: &mut Shelf, now: Millis, count: u64, p_fail: f64, discard: u64, kind: BatchKind) -> DispatchBatch {
        let taken = shelf.take_front(count.min(usize::MAX as u64) as usize);
        let shortfall = count.saturating_sub(taken.len() as u64);
        if shortfall > 0 && kind == BatchKind::Dispatch {
            warn!("shelf short by {shortfall} at {now}");
        }
        let (delivered, dropped) = apply_dropout(taken, p_fail, discard, &mut self.rng);
        let forwarded = delivered.into_iter().map(|m| (self.pacer.next_slot(now), m)).collect();
        DispatchBatch { at: now, kind, forwarded, dropped, shortfall }
    }

    /// Real-time accumulated: releases a batch whenever the shelf reaches the
    /// current threshold, then advances cyclically to the next threshold.
    /// Other strategies release nothing on arrival.
    pub fn after_shelve(&mut self, shelf: &mut Shelf, now: Millis) -> Vec<DispatchBatch> {
        let DispatchStrategySpec::RealTimeAccumulated { thresholds, p_fail, .. } = &self.strategy else {
            return Vec::new();
        };
        let (thresholds, p_fail) = (thresholds.clone(), *p_fail);
        let mut out = Vec::new();
        while !thresholds.is_empty() && shelf.len() as u64 >= thresholds[self.cursor] {
            let n = thresholds[self.cursor];
            self.cursor = (self.cursor + 1) % thresholds.len();
            out.push(self.release(shelf, now, n, p_fail, 0, BatchKind::Dispatch));
        }
        out
    }

    /// Releases one scheduled point.
    pub fn fire_point(&mut self, shelf: &mut Shelf, now: Millis, point: &ScheduledPoint) -> DispatchBatch {
        self.release(shelf, now, point.count, point.p_fail, point.discard, BatchKind::Dispatch)
    }

    /// Empties the shelf at task completion. Real-time accumulated keeps its
    /// per-message failure probability; rule-based residue is sent as is.
    pub fn flush(&mut self, shelf: &mut Shelf, now: Millis) -> DispatchBatch {
        let p_fail = match &self.strategy {
            DispatchStrategySpec::RealTimeAccumulated { p_fail, .. } => *p_fail,
            _ => 0.0,
        };
        let n = shelf.len() as u64;
        self.release(shelf, now, n, p_fail, 0, BatchKind::Flush)
    }

    /// Rule-based release schedule for a round whose last emission was shelved
    /// at `round_end`, with `pending` messages on the shelf. Absolute instants
    /// already in the past fire at `round_end`.
    pub fn round_schedule(&self, round_end: Millis, pending: u64) -> Result<Vec<ScheduledPoint>, CompileError> {
        let anchor = |base: TimeBase, offset: Millis| match base {
            TimeBase::RelativeToRoundEnd => round_end + offset,
            TimeBase::Absolute => offset.max(round_end),
        };
        match &self.strategy {
            DispatchStrategySpec::RealTimeAccumulated { .. } => Ok(Vec::new()),
            DispatchStrategySpec::TimePoint { points, time_base, .. } => {
                let mut out: Vec<ScheduledPoint> = points
                    .iter()
                    .map(|p| ScheduledPoint {
                        at: anchor(*time_base, p.at),
                        count: p.count,
                        p_fail: p.p_fail,
                        discard: p.discard,
                    })
                    .collect();
                out.sort_by_key(|p| p.at);
                Ok(out)
            }
            DispatchStrategySpec::TimeInterval {
                rate,
                domain,
                start,
                length,
                time_base,
                p_fail,
                discard_per_interval,
                capacity_per_sec,
            } => {
                let plan = compile_time_interval(rate, *domain, *length, *capacity_per_sec, pending, *p_fail, *discard_per_interval)?;
                let base = anchor(*time_base, *start);
                Ok(plan
                    .points
                    .iter()
                    .map(|p| ScheduledPoint {
                        at: base + p.offset,
                        count: p.count,
                        p_fail: p.p_fail,
                        discard: p.discard,
                    })
                    .collect())
            }
        }
    }
}
