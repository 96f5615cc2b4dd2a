//! Desk-scale stand-ins for the video-quality metrics.
//!
//! Motion smoothness uses linear interpolation as its frame interpolator: the
//! residual of predicting frame `k` from its neighbours is the second
//! difference. Imaging quality multiplies per-frame exposure, noise and
//! sharpness terms supplied by an upstream analyzer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|a| a * a).sum::<f64>().sqrt()
}

/// `1 - mean|f[k+1] - 2 f[k] + f[k-1]| / (2 mean|f[k+1] - f[k]|)`, clamped to `[0, 1]`.
///
/// A sequence without any motion scores 1.
pub fn motion_smoothness_proxy(frames: &[Vec<f64>]) -> Result<f64> {
    if frames.len() < 3 {
        return Err(MetricsError::Input(format!("need at least 3 frames, got {}", frames.len())));
    }
    let dim = frames[0].len();
    if let Some(f) = frames.iter().find(|f| f.len() != dim) {
        return Err(MetricsError::Dimension { expected: dim, got: f.len() });
    }
    let first: f64 = frames
        .windows(2)
        .map(|w| norm(w[1].iter().zip(&w[0]).map(|(a, b)| a - b)))
        .sum::<f64>()
        / (frames.len() - 1) as f64;
    let second: f64 = frames
        .windows(3)
        .map(|w| norm((0..dim).map(|i| w[2][i] - 2.0 * w[1][i] + w[0][i])))
        .sum::<f64>()
        / (frames.len() - 2) as f64;
    let denom = 2.0 * first;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - second / denom).clamp(0.0, 1.0))
}

/// Per-frame image statistics, each already normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameStats {
    /// Fraction of over/under-exposed pixels.
    pub clip: f64,
    pub noise: f64,
    pub sharpness: f64,
}

/// Mean over frames of `(1 - clip)(1 - noise) sharpness`.
pub fn imaging_quality_proxy(stats: &[FrameStats]) -> Result<f64> {
    if stats.is_empty() {
        return Err(MetricsError::Input("no frame statistics".into()));
    }
    let mut total = 0.0;
    for (i, s) in stats.iter().enumerate() {
        for (name, v) in [("clip", s.clip), ("noise", s.noise), ("sharpness", s.sharpness)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MetricsError::Input(format!("frame {i}: {name} = {v} is outside [0, 1]")));
            }
        }
        total += (1.0 - s.clip) * (1.0 - s.noise) * s.sharpness;
    }
    Ok((total / stats.len() as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStatsFile {
    pub schema_version: u32,
    pub frames: Vec<FrameStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub schema_version: u32,
    pub frames: Vec<Vec<f64>>,
}

pub fn load_frame_stats(path: &Path) -> Result<Vec<FrameStats>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MetricsError::File { path: path.to_owned(), message: e.to_string() })?;
    let f: FrameStatsFile = serde_json::from_str(&text)
        .map_err(|e| MetricsError::File { path: path.to_owned(), message: e.to_string() })?;
    Ok(f.frames)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MetricsError::File { path: path.to_owned(), message: e.to_string() })?;
    let f: TrajectoryFile = serde_json::from_str(&text)
        .map_err(|e| MetricsError::File { path: path.to_owned(), message: e.to_string() })?;
    Ok(f.frames)
}
