//! Discrete-event kernel: a virtual clock, an ordered event queue and
//! seeded random streams.
//!
//! Events fire in `(fire_time, seq)` order where `seq` is assigned when the
//! event is scheduled, so simultaneous events run in scheduling order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::panic::{self, AssertUnwindSafe};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::time::Millis;

/// Identifier of the random generator and seed-mixing scheme; recorded in trace headers.
pub const RNG_ID: &str = "chacha8/splitmix64-fnv1a-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug)]
pub struct Event<P> {
    pub id: EventId,
    pub fire_time: Millis,
    pub payload: P,
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("cannot schedule at {at} which is before now ({now})")]
    InPast { at: Millis, now: Millis },
    #[error("handler for event {id:?} at {time} panicked: {message}")]
    HandlerPanic { id: EventId, time: Millis, message: String },
    #[error("handler for event {id:?} at {time} failed: {message}")]
    Handler { id: EventId, time: Millis, message: String },
}

struct Entry<P> {
    time: Millis,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // BinaryHeap is a max-heap; reverse to pop the earliest entry first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub processed: u64,
    pub now: Millis,
}

/// Virtual clock plus pending events.
pub struct EventQueue<P> {
    now: Millis,
    next_seq: u64,
    heap: BinaryHeap<Entry<P>>,
    processed: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self {
            now: Millis::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            processed: 0,
        }
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Total events handled over the lifetime of the queue.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn peek_time(&self) -> Option<Millis> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn schedule(&mut self, at: Millis, payload: P) -> Result<EventId, EngineError> {
        if at < self.now {
            return Err(EngineError::InPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time: at, seq, payload });
        Ok(EventId(seq))
    }

    pub fn schedule_in(&mut self, delay: Millis, payload: P) -> EventId {
        let at = self.now.saturating_add(delay);
        // Cannot be in the past.
        self.schedule(at, payload).expect("future event")
    }

    /// Removes the next event with `fire_time <= t_end` and advances the clock to it.
    pub fn pop_until(&mut self, t_end: Millis) -> Option<Event<P>> {
        if self.heap.peek()?.time > t_end {
            return None;
        }
        let e = self.heap.pop()?;
        self.now = e.time;
        self.processed += 1;
        Some(Event {
            id: EventId(e.seq),
            fire_time: e.time,
            payload: e.payload,
        })
    }

    /// Processes every event with `fire_time <= t_end`, then moves the clock to
    /// `t_end` if it is still behind. A panicking handler is reported as
    /// [`EngineError::HandlerPanic`] naming the event.
    pub fn run_until<F, E>(&mut self, t_end: Millis, mut handler: F) -> Result<RunStats, EngineError>
    where
        F: FnMut(&mut EventQueue<P>, Event<P>) -> Result<(), E>,
        E: std::fmt::Display,
    {
        let mut processed = 0;
        while let Some(ev) = self.pop_until(t_end) {
            let (id, time) = (ev.id, ev.fire_time);
            processed += 1;
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| handler(self, ev)));
            match outcome {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    return Err(EngineError::Handler {
                        id,
                        time,
                        message: e.to_string(),
                    })
                }
                Err(p) => {
                    let message = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "non-string panic".into());
                    return Err(EngineError::HandlerPanic { id, time, message });
                }
            }
        }
        if self.now < t_end && t_end != Millis::MAX {
            self.now = t_end;
        }
        Ok(RunStats { processed, now: self.now })
    }
}

/// FNV-1a over bytes, 64-bit. Used for labels and categorical feature hashing.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator for `(seed, label, id)`.
///
/// The tuple is folded through splitmix64 (`label` first hashed with FNV-1a)
/// and the 256-bit ChaCha8 key is filled from four further splitmix64 outputs.
pub fn rng_stream(seed: u64, label: &str, id: u64) -> ChaCha8Rng {
    let mut state = seed;
    let a = splitmix64(&mut state);
    let mut state = a ^ fnv1a64(label.as_bytes());
    let b = splitmix64(&mut state);
    let mut state = b ^ id;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
