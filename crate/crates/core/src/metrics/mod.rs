//! Per-video metric values and the tables that hold them.

pub mod embedding;
pub mod ingest;
pub mod jobs;
pub mod proxies;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{identity_score, identity_score_with, CosinePolicy, EmbeddingSet};
pub use ingest::{ingest_metrics, MetricRow, MetricTable};
pub use jobs::{load_jobs, score_job, score_jobs, ScoreJob};
pub use proxies::{imaging_quality_proxy, motion_smoothness_proxy, FrameStats};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{sample_id}/{method}: {metric} = {value} is outside [0, 1]")]
    Range { sample_id: String, method: String, metric: String, value: f64 },
    #[error("{sample_id}/{method}: conflicting values for {metric}: {existing} vs {incoming}")]
    Conflict { sample_id: String, method: String, metric: String, existing: f64, incoming: f64 },
    #[error("{}: {message}", path.display())]
    File { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// The five metrics that enter the overall score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreMetric {
    Gme,
    Cur,
    Arc,
    Motion,
    Imaging,
}

impl CoreMetric {
    pub const ALL: [CoreMetric; 5] = [
        CoreMetric::Gme,
        CoreMetric::Cur,
        CoreMetric::Arc,
        CoreMetric::Motion,
        CoreMetric::Imaging,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            CoreMetric::Gme => "gme",
            CoreMetric::Cur => "cur",
            CoreMetric::Arc => "arc",
            CoreMetric::Motion => "motion",
            CoreMetric::Imaging => "imaging",
        }
    }

    /// Column title used in rendered tables.
    pub fn title(&self) -> &'static str {
        match self {
            CoreMetric::Gme => "GMEScore",
            CoreMetric::Cur => "CurScore",
            CoreMetric::Arc => "ArcScore",
            CoreMetric::Motion => "Motion",
            CoreMetric::Imaging => "Imaging",
        }
    }
}

impl fmt::Display for CoreMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for CoreMetric {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        CoreMetric::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| MetricsError::Input(format!("{s:?} is not a core metric")))
    }
}

/// Metric values for one generated video. Core values lie in `[0, 1]`;
/// extras (clipscore, fid, ...) are carried along but never scored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gme: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cur: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imaging: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, f64>,
}

impl MetricVector {
    /// All five core metrics, in `CoreMetric::ALL` order.
    pub fn from_core(values: [f64; 5]) -> Result<Self> {
        let mut m = MetricVector::default();
        for (k, v) in CoreMetric::ALL.into_iter().zip(values) {
            m.set(k, v)?;
        }
        Ok(m)
    }

    pub fn get(&self, metric: CoreMetric) -> Option<f64> {
        match metric {
            CoreMetric::Gme => self.gme,
            CoreMetric::Cur => self.cur,
            CoreMetric::Arc => self.arc,
            CoreMetric::Motion => self.motion,
            CoreMetric::Imaging => self.imaging,
        }
    }

    fn slot(&mut self, metric: CoreMetric) -> &mut Option<f64> {
        match metric {
            CoreMetric::Gme => &mut self.gme,
            CoreMetric::Cur => &mut self.cur,
            CoreMetric::Arc => &mut self.arc,
            CoreMetric::Motion => &mut self.motion,
            CoreMetric::Imaging => &mut self.imaging,
        }
    }

    pub fn set(&mut self, metric: CoreMetric, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::Range {
                sample_id: String::new(),
                method: String::new(),
                metric: metric.key().into(),
                value,
            });
        }
        *self.slot(metric) = Some(value);
        Ok(())
    }

    /// Value by name: core metric or extra.
    pub fn value(&self, name: &str) -> Option<f64> {
        match name.parse::<CoreMetric>() {
            Ok(m) => self.get(m),
            Err(_) => self.extras.get(name).copied(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in CoreMetric::ALL {
            if let Some(v) = self.get(m) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::Range {
                        sample_id: String::new(),
                        method: String::new(),
                        metric: m.key().into(),
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }
}
