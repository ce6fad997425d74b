//! CTR data: synthesis, CSV ingestion with feature hashing, and partitioning.
//!
//! Categorical features are hashed as `fnv1a64("<column>=<value>") mod dim`
//! and one-hot accumulated, so a synthetic record written to CSV and read back
//! lands on the same feature indices.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{positive_fraction, ClientDataset, Dataset, Example, ModelParams, WorkloadError};
use crate::engine::fnv1a64;
use crate::scalar::Scalar;

pub const DEFAULT_HASH_DIM: usize = 1 << 10;

pub fn hash_feature(column: &str, value: &str, dim: usize) -> u32 {
    let key = format!("{column}={value}");
    (fnv1a64(key.as_bytes()) % dim as u64) as u32
}

fn one_hot<T: Scalar>(indices: impl IntoIterator<Item = u32>) -> Vec<(u32, T)> {
    let mut acc: BTreeMap<u32, T> = BTreeMap::new();
    for i in indices {
        *acc.entry(i).or_insert_with(T::zero) += T::one();
    }
    acc.into_iter().collect()
}

/// Generator for hashed-categorical click data.
///
/// Each row has `fields` categorical columns `f0..`, with value `c<v>` where
/// `v = floor(cardinality * u^2)` for uniform `u` (small ids are common).
/// Labels are Bernoulli draws from a ground-truth model over the hashed
/// features: weights `N(0, weight_scale)` per bucket, bias `bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCtrConfig {
    pub rows: usize,
    pub dim: usize,
    pub fields: usize,
    pub cardinality: u32,
    pub weight_scale: f64,
    pub bias: f64,
}

impl SyntheticCtrConfig {
    pub fn new(rows: usize, dim: usize) -> Self {
        Self { rows, dim, fields: 8, cardinality: 64, weight_scale: 1.0, bias: -1.0 }
    }
}

/// Raw categorical records (one value id per field) plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCtr {
    pub values: Vec<Vec<u32>>,
    pub labels: Vec<bool>,
}

pub fn field_name(j: usize) -> String {
    format!("f{j}")
}

pub fn value_token(v: u32) -> String {
    format!("c{v}")
}

fn hashed_row(values: &[u32], dim: usize) -> Vec<u32> {
    values
        .iter()
        .enumerate()
        .map(|(j, &v)| hash_feature(&field_name(j), &value_token(v), dim))
        .collect()
}

pub fn generate_raw_ctr(cfg: &SyntheticCtrConfig, rng: &mut impl Rng) -> (RawCtr, ModelParams<f64>) {
    let truth = ModelParams {
        weights: (0..cfg.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * cfg.weight_scale
            })
            .collect(),
        bias: cfg.bias,
    };
    let mut values = Vec::with_capacity(cfg.rows);
    let mut labels = Vec::with_capacity(cfg.rows);
    for _ in 0..cfg.rows {
        let row: Vec<u32> = (0..cfg.fields)
            .map(|_| {
                let u: f64 = rng.random();
                ((cfg.cardinality as f64 * u * u) as u32).min(cfg.cardinality.saturating_sub(1))
            })
            .collect();
        let z = truth.bias + hashed_row(&row, cfg.dim).iter().map(|&i| truth.weights[i as usize]).sum::<f64>();
        let p = 1.0 / (1.0 + (-z).exp());
        labels.push(rng.random::<f64>() < p);
        values.push(row);
    }
    (RawCtr { values, labels }, truth)
}

pub fn generate_synthetic_ctr<T: Scalar>(cfg: &SyntheticCtrConfig, rng: &mut impl Rng) -> Dataset<T> {
    let (raw, truth) = generate_raw_ctr(cfg, rng);
    let rows = raw
        .values
        .iter()
        .zip(&raw.labels)
        .map(|(v, &label)| Example { features: one_hot(hashed_row(v, cfg.dim)), label })
        .collect();
    Dataset {
        dim: cfg.dim,
        rows,
        device_ids: None,
        truth: Some(ModelParams {
            weights: truth.weights.iter().map(|w| T::of(*w)).collect(),
            bias: T::of(truth.bias),
        }),
    }
}

/// Writes raw records as CSV (`device_id,click,f0..`) readable by [`ingest_csv`].
pub fn write_ctr_csv(raw: &RawCtr, rows_per_device: usize, path: &Path) -> Result<(), WorkloadError> {
    let io = |e: csv::Error| WorkloadError::Io { path: path.display().to_string(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let fields = raw.values.first().map_or(0, |r| r.len());
    let mut header = vec!["device_id".to_string(), "click".to_string()];
    header.extend((0..fields).map(field_name));
    w.write_record(&header).map_err(io)?;
    for (i, (vals, label)) in raw.values.iter().zip(&raw.labels).enumerate() {
        let mut rec = vec![format!("d{}", i / rows_per_device.max(1)), u8::from(*label).to_string()];
        rec.extend(vals.iter().map(|&v| value_token(v)));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| WorkloadError::Io { path: path.display().to_string(), source: e })
}

/// Column layout of an ingestible CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    #[serde(default)]
    pub device_id_column: Option<String>,
    pub categorical_columns: Vec<String>,
    #[serde(default = "default_hash_dim")]
    pub hash_dim: usize,
}

fn default_hash_dim() -> usize {
    DEFAULT_HASH_DIM
}

impl CsvSchema {
    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let text = std::fs::read_to_string(path).map_err(|e| WorkloadError::Io { path: path.display().to_string(), source: e })?;
        let schema: CsvSchema = serde_json::from_str(&text)
            .map_err(|e| WorkloadError::Schema { path: path.display().to_string(), message: e.to_string() })?;
        if schema.hash_dim == 0 {
            return Err(WorkloadError::Schema { path: path.display().to_string(), message: "hash_dim must be positive".into() });
        }
        Ok(schema)
    }
}

pub fn ingest_csv<T: Scalar>(path: &Path, schema: &CsvSchema) -> Result<Dataset<T>, WorkloadError> {
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|e| WorkloadError::Io { path: pstr.clone(), source: e })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| WorkloadError::MalformedRow { path: pstr.clone(), line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| WorkloadError::UnknownColumn(name.to_string()));
    let label_idx = col(&schema.label_column)?;
    let device_idx = schema.device_id_column.as_deref().map(col).transpose()?;
    let cat_idx: Vec<usize> = schema.categorical_columns.iter().map(|c| col(c)).collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut device_ids = device_idx.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            WorkloadError::MalformedRow { path: pstr.clone(), line, message: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let label = match rec.get(label_idx).map(str::trim) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(WorkloadError::MalformedRow {
                    path: pstr.clone(),
                    line,
                    message: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let features = one_hot(
            cat_idx
                .iter()
                .zip(&schema.categorical_columns)
                .map(|(&i, name)| hash_feature(name, rec.get(i).unwrap_or(""), schema.hash_dim)),
        );
        if let (Some(ids), Some(i)) = (device_ids.as_mut(), device_idx) {
            ids.push(rec.get(i).unwrap_or("").to_string());
        }
        rows.push(Example { features, label });
    }
    Ok(Dataset { dim: schema.hash_dim, rows, device_ids, truth: None })
}

/// How rows are dealt to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    /// A `high_pos_fraction_clients` share of clients draws from a
    /// positive-enriched pool targeting `pos_fraction_high`; the rest from a
    /// negative-enriched pool targeting `pos_fraction_low`.
    Skewed {
        high_pos_fraction_clients: f64,
        pos_fraction_high: f64,
        pos_fraction_low: f64,
    },
    /// Whole device groups (by the dataset's device ids) dealt to clients.
    ByDevice,
}

fn deal<T: Clone>(rows: &[Example<T>], order: &[usize], first_client: u32, n_clients: usize) -> Vec<ClientDataset<T>> {
    let mut out: Vec<ClientDataset<T>> =
        (0..n_clients).map(|c| ClientDataset { device_id: first_client + c as u32, rows: Vec::new() }).collect();
    for (k, &i) in order.iter().enumerate() {
        out[k % n_clients].rows.push(rows[i].clone());
    }
    out
}

/// Splits `dataset` across `n_clients` devices (ids `0..n_clients`). Every
/// input row lands in exactly one client.
pub fn partition<T: Scalar>(
    dataset: &Dataset<T>,
    n_clients: usize,
    spec: &PartitionSpec,
    rng: &mut impl Rng,
) -> Result<Vec<ClientDataset<T>>, WorkloadError> {
    let rows = &dataset.rows;
    if n_clients == 0 {
        return Err(WorkloadError::InvalidPartition("at least one client required".into()));
    }
    if rows.len() < n_clients {
        return Err(WorkloadError::TooFewRows { rows: rows.len(), clients: n_clients });
    }
    if n_clients == 1 {
        return Ok(vec![ClientDataset { device_id: 0, rows: rows.clone() }]);
    }
    match spec {
        PartitionSpec::Iid => {
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(rng);
            Ok(deal(rows, &order, 0, n_clients))
        }
        PartitionSpec::Skewed { high_pos_fraction_clients, pos_fraction_high, pos_fraction_low } => {
            for (name, v) in [
                ("high_pos_fraction_clients", high_pos_fraction_clients),
                ("pos_fraction_high", pos_fraction_high),
                ("pos_fraction_low", pos_fraction_low),
            ] {
                if !(0.0..=1.0).contains(v) {
                    return Err(WorkloadError::InvalidPartition(format!("{name} = {v} outside [0,1]")));
                }
            }
            let (fh, fl) = (pos_fraction_high.min(1.0 - 1e-9), pos_fraction_low.min(1.0 - 1e-9));
            let mut pos: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].label).collect();
            let mut neg: Vec<usize> = (0..rows.len()).filter(|&i| !rows[i].label).collect();
            pos.shuffle(rng);
            neg.shuffle(rng);
            let n_high = ((high_pos_fraction_clients * n_clients as f64).round() as usize).min(n_clients);
            let n_low = n_clients - n_high;
            // Choose how many negatives go to the high group so that both groups
            // hit their target positive fractions when the pools allow it:
            //   p_h = A n_h,  P - p_h = B (Q - n_h),  A = fh/(1-fh), B = fl/(1-fl).
            let (p, q) = (pos.len() as f64, neg.len() as f64);
            let (a, b) = (fh / (1.0 - fh), fl / (1.0 - fl));
            let (neg_high, pos_high) = if n_low == 0 {
                (q, p)
            } else if n_high == 0 {
                (0.0, 0.0)
            } else if (a - b).abs() < 1e-12 {
                let share = n_high as f64 / n_clients as f64;
                (q * share, p * share)
            } else {
                let nh = ((p - b * q) / (a - b)).clamp(0.0, q);
                (nh, (a * nh).clamp(0.0, p))
            };
            let mut ph = (pos_high.round() as usize).min(pos.len());
            let mut nh = (neg_high.round() as usize).min(neg.len());
            // Each group needs at least one row per client.
            while ph + nh < n_high && (ph < pos.len() || nh < neg.len()) {
                if ph < pos.len() {
                    ph += 1;
                } else {
                    nh += 1;
                }
            }
            while (pos.len() - ph) + (neg.len() - nh) < n_low && ph + nh > 0 {
                if nh > 0 {
                    nh -= 1;
                } else {
                    ph -= 1;
                }
            }
            let mut high: Vec<usize> = pos[..ph].iter().chain(&neg[..nh]).copied().collect();
            let mut low: Vec<usize> = pos[ph..].iter().chain(&neg[nh..]).copied().collect();
            if high.len() < n_high || low.len() < n_low {
                return Err(WorkloadError::TooFewRows { rows: rows.len(), clients: n_clients });
            }
            high.shuffle(rng);
            low.shuffle(rng);
            let mut out = Vec::with_capacity(n_clients);
            if n_high > 0 {
                out.extend(deal(rows, &high, 0, n_high));
            }
            if n_low > 0 {
                out.extend(deal(rows, &low, n_high as u32, n_low));
            }
            Ok(out)
        }
        PartitionSpec::ByDevice => {
            let ids = dataset
                .device_ids
                .as_ref()
                .ok_or_else(|| WorkloadError::InvalidPartition("dataset has no device ids".into()))?;
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, id) in ids.iter().enumerate() {
                groups.entry(id.as_str()).or_default().push(i);
            }
            if groups.len() < n_clients {
                return Err(WorkloadError::TooFewRows { rows: groups.len(), clients: n_clients });
            }
            let mut out: Vec<ClientDataset<T>> =
                (0..n_clients).map(|c| ClientDataset { device_id: c as u32, rows: Vec::new() }).collect();
            for (g, (_, idx)) in groups.into_iter().enumerate() {
                out[g % n_clients].rows.extend(idx.into_iter().map(|i| rows[i].clone()));
            }
            Ok(out)
        }
    }
}

/// Fraction of clients whose positive rate exceeds one half.
pub fn majority_positive_clients<T>(clients: &[ClientDataset<T>]) -> usize {
    clients.iter().filter(|c| positive_fraction(&c.rows) > 0.5).count()
}
