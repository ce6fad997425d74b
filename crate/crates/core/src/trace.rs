//! Traffic, metric and aggregation traces, and their CSV files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::cloud::HistoryEntry;
use crate::emulation::MetricSample;
use crate::engine::RNG_ID;
use crate::time::Millis;

pub const TRAFFIC_HEADER: &str = "t_ms,task_id,round,event,device_id,count,cumulative";
pub const METRICS_HEADER: &str = "device_id,grade,stage,t_ms,current_uA,voltage_mV,cpu_pct,mem_kb,bandwidth_B";
pub const AGGREGATION_HEADER: &str = "version,t_ms,messages,samples,train_acc,loss,test_acc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Emit,
    Shelve,
    Dispatch,
    Drop,
    Receive,
    Aggregate,
    Flush,
    /// Duplicate message refused by the sorter.
    Reject,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Emit => "emit",
            EventKind::Shelve => "shelve",
            EventKind::Dispatch => "dispatch",
            EventKind::Drop => "drop",
            EventKind::Receive => "receive",
            EventKind::Aggregate => "aggregate",
            EventKind::Flush => "flush",
            EventKind::Reject => "reject",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "emit" => EventKind::Emit,
            "shelve" => EventKind::Shelve,
            "dispatch" => EventKind::Dispatch,
            "drop" => EventKind::Drop,
            "receive" => EventKind::Receive,
            "aggregate" => EventKind::Aggregate,
            "flush" => EventKind::Flush,
            "reject" => EventKind::Reject,
            _ => return None,
        })
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub t: Millis,
    pub task_id: Arc<str>,
    pub round: u32,
    pub event: EventKind,
    pub device_id: Option<u32>,
    pub count: u64,
    /// Running total of `count` for this task and event kind.
    pub cumulative: u64,
}

/// Append-only traffic log with per-(task, event) running totals.
#[derive(Debug, Default, Clone)]
pub struct TrafficTrace {
    records: Vec<TraceRecord>,
    totals: BTreeMap<(Arc<str>, EventKind), u64>,
}

impl TrafficTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, t: Millis, task_id: &Arc<str>, round: u32, event: EventKind, device_id: Option<u32>, count: u64) {
        let total = self.totals.entry((task_id.clone(), event)).or_insert(0);
        *total += count;
        self.records.push(TraceRecord { t, task_id: task_id.clone(), round, event, device_id, count, cumulative: *total });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn total(&self, task_id: &str, event: EventKind) -> u64 {
        self.totals.iter().find(|((t, e), _)| &**t == task_id && *e == event).map_or(0, |(_, v)| *v)
    }

    /// Records of one task, with running totals as if it ran alone.
    pub fn for_task(&self, task_id: &str) -> Vec<TraceRecord> {
        self.records.iter().filter(|r| &*r.task_id == task_id).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Fixed notation with nine significant digits.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x.is_infinite() { format!("{}inf", if x < 0.0 { "-" } else { "" }) } else { "0".into() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s == "-0" || s.chars().all(|c| c == '0' || c == '.' || c == '-') { "0".into() } else { s }
}

/// Rounds to nine significant digits (for JSON output).
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

pub fn header_comment(seed: u64) -> String {
    format!("# edgesim trace v1 seed={seed} rng={RNG_ID}")
}

fn create(path: &Path, seed: u64, header: &str) -> io::Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header_comment(seed))?;
    writeln!(w, "{header}")?;
    Ok(w)
}

pub fn write_traffic_csv(path: &Path, seed: u64, records: &[TraceRecord]) -> io::Result<()> {
    let mut w = create(path, seed, TRAFFIC_HEADER)?;
    for r in records {
        let dev = r.device_id.map(|d| d.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{},{}", r.t.0, r.task_id, r.round, r.event, dev, r.count, r.cumulative)?;
    }
    w.flush()
}

pub fn write_metrics_csv(path: &Path, seed: u64, samples: &[MetricSample]) -> io::Result<()> {
    let mut w = create(path, seed, METRICS_HEADER)?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.device_id,
            s.grade,
            s.stage,
            s.t.0,
            fmt_float(s.current_ua),
            fmt_float(s.voltage_mv),
            fmt_float(s.cpu_pct),
            fmt_float(s.mem_kb),
            fmt_float(s.bandwidth_b)
        )?;
    }
    w.flush()
}

pub fn write_aggregation_csv(path: &Path, seed: u64, history: &[HistoryEntry]) -> io::Result<()> {
    let mut w = create(path, seed, AGGREGATION_HEADER)?;
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    for h in history {
        writeln!(w, "{},{},{},{},{},{},{}", h.version, h.t.0, h.messages, h.samples, opt(h.train_acc), opt(h.loss), opt(h.test_acc))?;
    }
    w.flush()
}

#[derive(Debug, thiserror::Error)]
pub enum TraceReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Reads a traffic CSV written by [`write_traffic_csv`].
pub fn read_traffic_csv(path: &Path) -> Result<Vec<TraceRecord>, TraceReadError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut names: BTreeMap<String, Arc<str>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line == TRAFFIC_HEADER || line.is_empty() {
            continue;
        }
        let bad = |message: &str| TraceReadError::Malformed { line: line_no, message: message.into() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad number"));
        let task_id = names.entry(f[1].to_string()).or_insert_with(|| Arc::from(f[1])).clone();
        out.push(TraceRecord {
            t: Millis(num(f[0])?),
            task_id,
            round: num(f[2])? as u32,
            event: EventKind::parse(f[3]).ok_or_else(|| bad("unknown event"))?,
            device_id: if f[4].is_empty() { None } else { Some(num(f[4])? as u32) },
            count: num(f[5])?,
            cumulative: num(f[6])?,
        });
    }
    Ok(out)
}

/// Largest number of `receive` events any task has in a 1000 ms window,
/// per task.
pub fn peak_receive_rate(records: &[TraceRecord]) -> BTreeMap<Arc<str>, u64> {
    let mut times: BTreeMap<Arc<str>, Vec<(Millis, u64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.event == EventKind::Receive) {
        times.entry(r.task_id.clone()).or_default().push((r.t, r.count));
    }
    times
        .into_iter()
        .map(|(task, mut ts)| {
            ts.sort();
            let (mut lo, mut in_window, mut peak) = (0usize, 0u64, 0u64);
            for hi in 0..ts.len() {
                in_window += ts[hi].1;
                while ts[hi].0 .0 - ts[lo].0 .0 >= 1000 {
                    in_window -= ts[lo].1;
                    lo += 1;
                }
                peak = peak.max(in_window);
            }
            (task, peak)
        })
        .collect()
}
