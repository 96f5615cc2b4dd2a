//! Metric tables keyed by sample and method, and ingestion of precomputed
//! values from external evaluators.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CoreMetric, MetricVector, MetricsError, Result};
use crate::artifact::{read_jsonl, SCHEMA_VERSION};

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub sample_id: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

/// `sample_id -> method -> metrics`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub samples: BTreeMap<String, BTreeMap<String, MetricVector>>,
}

impl MetricTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, sample_id: &str, method: &str) -> Option<&MetricVector> {
        self.samples.get(sample_id)?.get(method)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = self.samples.values().flat_map(|m| m.keys().cloned()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn len(&self) -> usize {
        self.samples.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sets one value. Setting a different value for an existing key is a
    /// conflict unless `overwrite` is true.
    pub fn insert(&mut self, sample_id: &str, method: &str, metric: &str, value: f64, overwrite: bool) -> Result<()> {
        let core = metric.parse::<CoreMetric>().ok();
        let in_range = match core {
            Some(_) => (0.0..=1.0).contains(&value),
            None => value.is_finite(),
        };
        if !in_range {
            return Err(MetricsError::Range {
                sample_id: sample_id.into(),
                method: method.into(),
                metric: metric.into(),
                value,
            });
        }
        let vector = self.samples.entry(sample_id.into()).or_default().entry(method.into()).or_default();
        if let Some(existing) = vector.value(metric) {
            if existing != value && !overwrite {
                return Err(MetricsError::Conflict {
                    sample_id: sample_id.into(),
                    method: method.into(),
                    metric: metric.into(),
                    existing,
                    incoming: value,
                });
            }
        }
        match core {
            Some(m) => vector.set(m, value)?,
            None => {
                vector.extras.insert(metric.into(), value);
            }
        }
        Ok(())
    }

    pub fn insert_vector(&mut self, sample_id: &str, method: &str, v: &MetricVector) -> Result<()> {
        for row in rows_of(sample_id, method, v) {
            self.insert(&row.sample_id, &row.method, &row.metric, row.value, false)?;
        }
        Ok(())
    }

    /// Folds `other` into `self`. Where both hold different values for the same
    /// key, `prefer_local` keeps ours; otherwise the merge fails.
    pub fn merge(&mut self, other: &MetricTable, prefer_local: bool) -> Result<()> {
        for row in other.rows() {
            let ours = self.get(&row.sample_id, &row.method).and_then(|v| v.value(&row.metric));
            match ours {
                Some(v) if v != row.value && prefer_local => {}
                _ => self.insert(&row.sample_id, &row.method, &row.metric, row.value, false)?,
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        self.samples
            .iter()
            .flat_map(|(s, methods)| methods.iter().flat_map(move |(m, v)| rows_of(s, m, v)))
            .collect()
    }

    pub fn from_rows(rows: &[MetricRow]) -> Result<Self> {
        let mut t = MetricTable::new();
        for r in rows {
            if let Some(v) = r.schema_version {
                if v != SCHEMA_VERSION {
                    return Err(MetricsError::Input(format!(
                        "{}/{}: unsupported schema_version {v}",
                        r.sample_id, r.method
                    )));
                }
            }
            t.insert(&r.sample_id, &r.method, &r.metric, r.value, false)?;
        }
        Ok(t)
    }
}

fn rows_of(sample_id: &str, method: &str, v: &MetricVector) -> Vec<MetricRow> {
    let row = |metric: &str, value: f64| MetricRow {
        schema_version: None,
        sample_id: sample_id.into(),
        method: method.into(),
        metric: metric.into(),
        value,
    };
    CoreMetric::ALL
        .into_iter()
        .filter_map(|m| v.get(m).map(|x| row(m.key(), x)))
        .chain(v.extras.iter().map(|(k, x)| row(k, *x)))
        .collect()
}

/// Reads a metrics JSONL file (header line optional).
pub fn ingest_metrics(path: &Path) -> Result<MetricTable> {
    let (_, rows) = read_jsonl::<MetricRow>(path)
        .map_err(|e| MetricsError::File { path: path.to_owned(), message: e.to_string() })?;
    MetricTable::from_rows(&rows)
}
