//! Dataset references and the per-task store of loaded client data.
//!
//! A reference is either
//! `synthetic?rows=..&dim=..&seed=..&test_rows=..&partition=..` or
//! `csv:<data.csv>?schema=<schema.json>&test_fraction=..&partition=..`.
//! `partition` is `iid` (default), `skewed:<clients>:<high>:<low>` or
//! `by_device`. Relative paths resolve against the task file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::emulation::{ClientData, EmulationError};
use crate::engine::rng_stream;
use crate::workload::data::{generate_synthetic_ctr, ingest_csv, partition, CsvSchema, PartitionSpec, SyntheticCtrConfig};
use crate::workload::{ClientDataset, Dataset, Example, WorkloadError};

pub const DEFAULT_ROWS_PER_CLIENT: usize = 20;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("bad dataset reference '{0}': {1}")]
    BadRef(String, String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        /// `rows` is `None` when sized per client at load time.
        rows: Option<usize>,
        rows_per_client: usize,
        dim: usize,
        fields: usize,
        cardinality: u32,
        /// Falls back to the task seed.
        seed: Option<u64>,
        /// Held-out rows; defaults to a quarter of the training rows.
        test_rows: Option<usize>,
    },
    Csv { data: PathBuf, schema: PathBuf, test_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRef {
    pub source: DatasetSource,
    pub partition: PartitionSpec,
}

fn parse_partition(v: &str) -> Result<PartitionSpec, String> {
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        ["iid"] => Ok(PartitionSpec::Iid),
        ["by_device"] => Ok(PartitionSpec::ByDevice),
        ["skewed", c, h, l] => {
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("'{s}' is not a number"));
            Ok(PartitionSpec::Skewed { high_pos_fraction_clients: num(c)?, pos_fraction_high: num(h)?, pos_fraction_low: num(l)? })
        }
        _ => Err(format!("unknown partition '{v}'")),
    }
}

impl DatasetRef {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CatalogError> {
        let bad = |m: String| CatalogError::BadRef(text.to_string(), m);
        let (head, query) = text.split_once('?').unwrap_or((text, ""));
        let mut params: BTreeMap<&str, &str> = BTreeMap::new();
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad(format!("'{pair}' is not key=value")))?;
            if params.insert(k, v).is_some() {
                return Err(bad(format!("'{k}' given twice")));
            }
        }
        let mut take = |k: &str| params.remove(k);
        let partition = take("partition").map(parse_partition).transpose().map_err(bad)?.unwrap_or(PartitionSpec::Iid);
        fn num<T: std::str::FromStr>(k: &str, v: Option<&str>) -> Result<Option<T>, String> {
            v.map(|s| s.parse::<T>().map_err(|_| format!("{k}: '{s}' is not a valid number"))).transpose()
        }
        let source = if head == "synthetic" {
            let dim = num("dim", take("dim")).map_err(bad)?.unwrap_or(crate::workload::data::DEFAULT_HASH_DIM);
            let fields = num("fields", take("fields")).map_err(bad)?.unwrap_or(8);
            let cardinality = num("cardinality", take("cardinality")).map_err(bad)?.unwrap_or(64);
            if dim == 0 || fields == 0 || cardinality == 0 {
                return Err(bad("dim, fields and cardinality must be positive".into()));
            }
            DatasetSource::Synthetic {
                rows: num("rows", take("rows")).map_err(bad)?,
                rows_per_client: num("rows_per_client", take("rows_per_client")).map_err(bad)?.unwrap_or(DEFAULT_ROWS_PER_CLIENT),
                dim,
                fields,
                cardinality,
                seed: num("seed", take("seed")).map_err(bad)?,
                test_rows: num("test_rows", take("test_rows")).map_err(bad)?,
            }
        } else if let Some(path) = head.strip_prefix("csv:") {
            let schema = take("schema").ok_or_else(|| bad("csv reference needs schema=".into()))?;
            let test_fraction = num("test_fraction", take("test_fraction")).map_err(bad)?.unwrap_or(DEFAULT_TEST_FRACTION);
            if !(0.0..1.0).contains(&test_fraction) {
                return Err(bad("test_fraction must be in [0, 1)".into()));
            }
            DatasetSource::Csv { data: base_dir.join(path), schema: base_dir.join(schema), test_fraction }
        } else {
            return Err(bad("expected 'synthetic' or 'csv:<path>'".into()));
        };
        if let Some(k) = params.keys().next() {
            return Err(bad(format!("unknown parameter '{k}'")));
        }
        Ok(Self { source, partition })
    }

    /// Checks that referenced files exist and the schema reads.
    pub fn check_resolvable(&self) -> Result<(), CatalogError> {
        if let DatasetSource::Csv { data, schema, .. } = &self.source {
            for p in [data, schema] {
                if !p.is_file() {
                    return Err(CatalogError::MissingFile(p.clone()));
                }
            }
            let s = CsvSchema::load(schema)?;
            if self.partition == PartitionSpec::ByDevice && s.device_id_column.is_none() {
                return Err(CatalogError::BadRef(data.display().to_string(), "by_device needs a device id column".into()));
            }
        }
        Ok(())
    }

    /// Builds the dataset, holds out a test split and deals the rest to
    /// `n_clients` devices (ids `0..n_clients`).
    pub fn load(&self, n_clients: usize, task_seed: u64) -> Result<LoadedDataset, CatalogError> {
        let (train, test) = match &self.source {
            DatasetSource::Synthetic { rows, rows_per_client, dim, fields, cardinality, seed, test_rows } => {
                let train_rows = rows.unwrap_or(rows_per_client * n_clients);
                let test_rows = test_rows.unwrap_or(train_rows / 4);
                let cfg = SyntheticCtrConfig { fields: *fields, cardinality: *cardinality, ..SyntheticCtrConfig::new(train_rows + test_rows, *dim) };
                let mut rng = rng_stream(seed.unwrap_or(task_seed), "data", 0);
                let mut all: Dataset<f64> = generate_synthetic_ctr(&cfg, &mut rng);
                let test = all.rows.split_off(train_rows);
                (all, test)
            }
            DatasetSource::Csv { data, schema, test_fraction } => {
                self.check_resolvable()?;
                let schema = CsvSchema::load(schema)?;
                let all: Dataset<f64> = ingest_csv(data, &schema)?;
                let mut order: Vec<usize> = (0..all.rows.len()).collect();
                order.shuffle(&mut rng_stream(task_seed, "split", 0));
                let n_test = (all.rows.len() as f64 * test_fraction).floor() as usize;
                let mut is_test = vec![false; all.rows.len()];
                for &i in &order[..n_test] {
                    is_test[i] = true;
                }
                let mut train = Dataset { dim: all.dim, rows: Vec::new(), device_ids: all.device_ids.as_ref().map(|_| Vec::new()), truth: None };
                let mut test = Vec::with_capacity(n_test);
                for (i, row) in all.rows.into_iter().enumerate() {
                    if is_test[i] {
                        test.push(row);
                    } else {
                        if let (Some(ids), Some(src)) = (train.device_ids.as_mut(), all.device_ids.as_ref()) {
                            ids.push(src[i].clone());
                        }
                        train.rows.push(row);
                    }
                }
                (train, test)
            }
        };
        let mut rng = rng_stream(task_seed, "partition", 0);
        let clients = if n_clients == 0 { Vec::new() } else { partition(&train, n_clients, &self.partition, &mut rng)? };
        Ok(LoadedDataset { dim: train.dim, clients, test })
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dim: usize,
    pub clients: Vec<ClientDataset<f64>>,
    pub test: Vec<Example<f64>>,
}

/// Datasets of one task, keyed by reference text.
#[derive(Debug, Default)]
pub struct DatasetCatalog {
    base_dir: PathBuf,
    loaded: BTreeMap<String, LoadedDataset>,
}

impl DatasetCatalog {
    pub fn new(base_dir: &Path) -> Self {
        Self { base_dir: base_dir.to_path_buf(), loaded: BTreeMap::new() }
    }

    /// Loads `reference` on first use.
    pub fn ensure(&mut self, reference: &str, n_clients: usize, task_seed: u64) -> Result<&LoadedDataset, CatalogError> {
        if !self.loaded.contains_key(reference) {
            let d = DatasetRef::parse(reference, &self.base_dir)?.load(n_clients, task_seed)?;
            self.loaded.insert(reference.to_string(), d);
        }
        Ok(&self.loaded[reference])
    }

    pub fn get(&self, reference: &str) -> Option<&LoadedDataset> {
        self.loaded.get(reference)
    }
}

impl ClientData for DatasetCatalog {
    fn client(&self, dataset_ref: &str, device_id: u32) -> Result<&ClientDataset<f64>, EmulationError> {
        let d = self.loaded.get(dataset_ref).ok_or_else(|| EmulationError::UnknownDataset(dataset_ref.into()))?;
        d.clients
            .get(device_id as usize)
            .ok_or(EmulationError::MissingClient { dataset: dataset_ref.into(), device: device_id })
    }

    fn dim(&self, dataset_ref: &str) -> Result<usize, EmulationError> {
        self.loaded.get(dataset_ref).map(|d| d.dim).ok_or_else(|| EmulationError::UnknownDataset(dataset_ref.into()))
    }
}
