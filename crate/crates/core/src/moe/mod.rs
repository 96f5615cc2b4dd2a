//! Weighted overall score and per-sample best-of-N selection.

pub mod calibrate;
pub mod nnls;
pub mod select;
pub mod table;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::SCHEMA_VERSION;
use crate::metrics::{CoreMetric, MetricVector, MetricsError};

pub use calibrate::{
    calibrate_or_fallback, calibrate_weights, reference_rows, CalibrationReport, CalibrationRow, RowFit,
    CALIBRATION_TOLERANCE,
};
pub use select::{select_per_sample, Exclusion, MethodSummary, SampleSelection, SelectionConfig, SelectionReport};
pub use table::render_table;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("missing metric {0}")]
    MissingMetric(CoreMetric),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, MoeError>;

/// Nonnegative weights over the core metrics, at least one positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct WeightVector {
    weights: BTreeMap<CoreMetric, f64>,
}

impl WeightVector {
    pub fn new(weights: BTreeMap<CoreMetric, f64>) -> Result<Self> {
        for (m, w) in &weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(MoeError::Weights(format!("{m} = {w} must be finite and nonnegative")));
            }
        }
        if !weights.values().any(|&w| w > 0.0) {
            return Err(MoeError::Weights("at least one weight must be positive".into()));
        }
        Ok(Self { weights })
    }

    /// Weights in `CoreMetric::ALL` order.
    pub fn from_array(values: [f64; 5]) -> Result<Self> {
        Self::new(CoreMetric::ALL.into_iter().zip(values).collect())
    }

    pub fn uniform() -> Self {
        Self::from_array([0.2; 5]).expect("uniform weights are valid")
    }

    pub fn get(&self, metric: CoreMetric) -> f64 {
        self.weights.get(&metric).copied().unwrap_or(0.0)
    }

    pub fn as_array(&self) -> [f64; 5] {
        CoreMetric::ALL.map(|m| self.get(m))
    }

    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|(m, w)| (*m, w * lambda)).collect())
    }

    /// Reads a weights file: either a bare `{metric: weight}` map or an object
    /// with a `weights` field (as written by calibration).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MoeError::Io(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| MoeError::Io(format!("{}: {e}", path.display())))?;
        let inner = match value.get("weights") {
            Some(w) => w.clone(),
            None => value,
        };
        serde_json::from_value(inner).map_err(|e| MoeError::Weights(format!("{}: {e}", path.display())))
    }
}

impl TryFrom<BTreeMap<String, f64>> for WeightVector {
    type Error = MoeError;

    fn try_from(raw: BTreeMap<String, f64>) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (name, w) in raw {
            let m = name
                .parse::<CoreMetric>()
                .map_err(|_| MoeError::Weights(format!("{name:?} is not a core metric")))?;
            weights.insert(m, w);
        }
        Self::new(weights)
    }
}

impl From<WeightVector> for BTreeMap<String, f64> {
    fn from(w: WeightVector) -> Self {
        w.weights.into_iter().map(|(m, v)| (m.key().to_string(), v)).collect()
    }
}

/// A weights file as committed or written by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub schema_version: u32,
    pub weights: WeightVector,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationReport>,
}

impl WeightsFile {
    pub fn new(weights: WeightVector, source: &str, calibration: Option<CalibrationReport>) -> Self {
        Self { schema_version: SCHEMA_VERSION, weights, source: source.into(), calibration }
    }
}

/// The committed default weights.
pub fn default_weights() -> WeightVector {
    let file: WeightsFile =
        serde_json::from_str(include_str!("../../data/default_weights.json")).expect("bundled weights parse");
    file.weights
}

/// `sum_i w_i * M_i` over the core metrics. Extras are ignored; a metric with
/// nonzero weight that is absent is an error.
pub fn overall_score(m: &MetricVector, w: &WeightVector) -> Result<f64> {
    let mut total = 0.0;
    for metric in CoreMetric::ALL {
        let weight = w.get(metric);
        if weight == 0.0 {
            continue;
        }
        total += weight * m.get(metric).ok_or(MoeError::MissingMetric(metric))?;
    }
    Ok(total)
}
