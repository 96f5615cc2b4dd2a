//! Scoring jobs: the per-video input files from which local metrics are computed.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embedding::{identity_score_with, CosinePolicy, EmbeddingSet};
use super::proxies::{imaging_quality_proxy, load_frame_stats, load_trajectory, motion_smoothness_proxy};
use super::{CoreMetric, MetricTable, MetricVector, MetricsError, Result};
use crate::artifact::read_jsonl;

/// One generated video. Paths are relative to the jobs file unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreJob {
    pub sample_id: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cur_embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc_embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_stats: Option<String>,
}

fn context(job: &ScoreJob, e: MetricsError) -> MetricsError {
    match e {
        MetricsError::Range { metric, value, .. } => MetricsError::Range {
            sample_id: job.sample_id.clone(),
            method: job.method.clone(),
            metric,
            value,
        },
        MetricsError::File { .. } => e,
        other => MetricsError::Input(format!("{}/{}: {other}", job.sample_id, job.method)),
    }
}

/// Computes every metric the job has inputs for.
pub fn score_job(job: &ScoreJob, base_dir: &Path, policy: CosinePolicy) -> Result<MetricVector> {
    let path = |p: &str| base_dir.join(p);
    let mut m = MetricVector::default();
    let run = |m: &mut MetricVector| -> Result<()> {
        if let Some(p) = &job.cur_embeddings {
            m.set(CoreMetric::Cur, identity_score_with(&EmbeddingSet::load(&path(p))?, policy)?)?;
        }
        if let Some(p) = &job.arc_embeddings {
            m.set(CoreMetric::Arc, identity_score_with(&EmbeddingSet::load(&path(p))?, policy)?)?;
        }
        if let Some(p) = &job.trajectory {
            m.set(CoreMetric::Motion, motion_smoothness_proxy(&load_trajectory(&path(p))?)?)?;
        }
        if let Some(p) = &job.frame_stats {
            m.set(CoreMetric::Imaging, imaging_quality_proxy(&load_frame_stats(&path(p))?)?)?;
        }
        Ok(())
    };
    run(&mut m).map_err(|e| context(job, e))?;
    Ok(m)
}

pub fn load_jobs(path: &Path) -> Result<Vec<ScoreJob>> {
    let (_, jobs) = read_jsonl::<ScoreJob>(path)
        .map_err(|e| MetricsError::File { path: path.to_owned(), message: e.to_string() })?;
    Ok(jobs)
}

/// Scores all jobs in parallel; the table is assembled in job order.
pub fn score_jobs(jobs: &[ScoreJob], base_dir: &Path, policy: CosinePolicy) -> Result<MetricTable> {
    let vectors: Vec<MetricVector> =
        jobs.par_iter().map(|j| score_job(j, base_dir, policy)).collect::<Result<_>>()?;
    let mut table = MetricTable::new();
    for (job, v) in jobs.iter().zip(&vectors) {
        table.insert_vector(&job.sample_id, &job.method, v)?;
    }
    Ok(table)
}
