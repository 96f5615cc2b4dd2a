//! Fitting weights to published (metrics, overall score) rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::nnls::nnls;
use super::{overall_score, MoeError, Result, WeightVector};
use crate::metrics::{CoreMetric, MetricVector};

/// Largest per-row residual at which a fit is accepted.
pub const CALIBRATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub label: String,
    pub metrics: MetricVector,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFit {
    pub label: String,
    pub target: f64,
    pub fitted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub solver: String,
    pub rows: Vec<RowFit>,
    pub max_abs_residual: f64,
    pub tolerance: f64,
    pub accepted: bool,
    pub rank: usize,
    pub degenerate: bool,
    pub iterations: usize,
}

#[derive(Debug, Deserialize)]
struct RowsFile {
    schema_version: u32,
    rows: Vec<CalibrationRow>,
}

/// The bundled published method rows.
pub fn reference_rows() -> Vec<CalibrationRow> {
    parse_rows(include_str!("../../data/reference_rows.json")).expect("bundled rows parse")
}

pub fn parse_rows(text: &str) -> Result<Vec<CalibrationRow>> {
    let file: RowsFile = serde_json::from_str(text).map_err(|e| MoeError::Io(e.to_string()))?;
    if file.schema_version != crate::artifact::SCHEMA_VERSION {
        return Err(MoeError::Io(format!("unsupported schema_version {}", file.schema_version)));
    }
    for r in &file.rows {
        r.metrics.validate()?;
    }
    Ok(file.rows)
}

/// Nonnegative least squares over the five core weights.
///
/// A rank-deficient system is not an error: the report sets `degenerate`
/// and the weights are the minimum-norm active-set solution.
pub fn calibrate_weights(rows: &[CalibrationRow]) -> Result<(WeightVector, CalibrationReport)> {
    if rows.len() < 5 {
        return Err(MoeError::Precondition(format!("calibration needs at least 5 rows, got {}", rows.len())));
    }
    let mut a = DMatrix::zeros(rows.len(), 5);
    let mut b = DVector::zeros(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if !(r.overall > 0.0 && r.overall < 1.0) {
            return Err(MoeError::Precondition(format!("{}: target {} is outside (0, 1)", r.label, r.overall)));
        }
        for (j, m) in CoreMetric::ALL.into_iter().enumerate() {
            a[(i, j)] = r
                .metrics
                .get(m)
                .ok_or_else(|| MoeError::Precondition(format!("{}: missing metric {m}", r.label)))?;
        }
        b[i] = r.overall;
    }
    let sol = nnls(&a, &b);
    let degenerate = sol.rank < 5;
    if degenerate {
        log::warn!("calibration system has rank {} < 5; returning minimum-norm weights", sol.rank);
    }
    let arr: [f64; 5] = sol.x.clone().try_into().expect("five weights");
    let weights = WeightVector::from_array(arr)
        .map_err(|e| MoeError::Precondition(format!("fit produced unusable weights: {e}")))?;
    let fits: Vec<RowFit> = rows
        .iter()
        .map(|r| {
            let fitted = overall_score(&r.metrics, &weights)?;
            Ok(RowFit { label: r.label.clone(), target: r.overall, fitted, residual: fitted - r.overall })
        })
        .collect::<Result<_>>()?;
    let max_abs_residual = fits.iter().map(|f| f.residual.abs()).fold(0.0, f64::max);
    let report = CalibrationReport {
        solver: "lawson-hanson nnls, svd subproblems".into(),
        rows: fits,
        max_abs_residual,
        tolerance: CALIBRATION_TOLERANCE,
        accepted: max_abs_residual <= CALIBRATION_TOLERANCE,
        rank: sol.rank,
        degenerate,
        iterations: sol.iterations,
    };
    Ok((weights, report))
}

/// Calibrated weights when the fit is within tolerance, uniform weights
/// otherwise. The boolean is true when the fallback was used.
pub fn calibrate_or_fallback(rows: &[CalibrationRow]) -> Result<(WeightVector, CalibrationReport, bool)> {
    let (w, report) = calibrate_weights(rows)?;
    if report.accepted {
        Ok((w, report, false))
    } else {
        log::warn!(
            "calibration residual {:.4} exceeds {}; falling back to uniform weights",
            report.max_abs_residual,
            report.tolerance
        );
        Ok((WeightVector::uniform(), report, true))
    }
}
