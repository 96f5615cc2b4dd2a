//! Synthetic evaluation workspaces: a prompt manifest plus, for every sample
//! and candidate method, the embedding, trajectory and frame-statistic files
//! the scorer consumes and a file of externally computed metrics.
//!
//! Each method has a quality profile; per-video values scatter around it so
//! that different methods win on different samples.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::{jsonl_bytes, write_atomic, SCHEMA_VERSION};
use crate::enhance::SampleRecord;
use crate::metrics::proxies::{FrameStatsFile, TrajectoryFile};
use crate::metrics::{EmbeddingSet, FrameStats, MetricRow, MetricTable, MetricVector, ScoreJob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodProfile {
    pub name: String,
    /// Mean frame-to-reference cosine.
    pub identity: f64,
    pub gme: f64,
    /// Per-frame positional jitter relative to the motion step.
    pub jitter: f64,
    pub clip: f64,
    pub noise: f64,
    pub sharpness: f64,
}

impl MethodProfile {
    fn new(name: &str, identity: f64, gme: f64, jitter: f64, clip: f64, noise: f64, sharpness: f64) -> Self {
        Self { name: name.into(), identity, gme, jitter, clip, noise, sharpness }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub samples: usize,
    pub methods: Vec<MethodProfile>,
    pub embedding_dim: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            samples: 50,
            methods: vec![
                MethodProfile::new("hailuo", 0.06, 0.63, 0.03, 0.05, 0.08, 0.78),
                MethodProfile::new("phantom", 0.30, 0.64, 0.04, 0.07, 0.10, 0.75),
                MethodProfile::new("vace", 0.31, 0.62, 0.05, 0.07, 0.10, 0.74),
                MethodProfile::new("vace+pe", 0.40, 0.61, 0.05, 0.08, 0.10, 0.73),
                MethodProfile::new("vace+pe+ie", 0.35, 0.62, 0.05, 0.06, 0.10, 0.75),
                MethodProfile::new("vace+pe+ge", 0.45, 0.60, 0.06, 0.06, 0.09, 0.75),
            ],
            embedding_dim: 32,
            frames: 12,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureLayout {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub jobs: PathBuf,
    pub external_metrics: PathBuf,
}

const SUBJECTS: [&str; 5] = ["A woman", "A man", "An elderly man", "A young woman", "A boy"];
const ACTIONS: [&str; 5] = [
    "jogs along a beach at sunrise",
    "reads a book in a quiet library",
    "waves at the camera from a balcony",
    "plays the guitar by a campfire",
    "walks through a crowded market",
];

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

/// A unit vector at cosine `c` to the unit vector `r`.
fn at_cosine(rng: &mut ChaCha8Rng, r: &[f64], c: f64) -> Vec<f64> {
    let u = unit(rng, r.len());
    let along: f64 = u.iter().zip(r).map(|(a, b)| a * b).sum();
    let ortho: Vec<f64> = u.iter().zip(r).map(|(a, b)| a - along * b).collect();
    let n = ortho.iter().map(|a| a * a).sum::<f64>().sqrt();
    let s = (1.0 - c * c).max(0.0).sqrt();
    r.iter().zip(&ortho).map(|(a, o)| c * a + s * o / n).collect()
}

fn embeddings(rng: &mut ChaCha8Rng, spec: &FixtureSpec, reference: &[f64], mean: f64, tag: &str) -> EmbeddingSet {
    let video = (mean + 0.08 * gauss(rng)).clamp(-0.2, 0.95);
    let frames: Vec<Vec<f64>> = (0..spec.frames)
        .map(|_| {
            let c = (video + 0.03 * gauss(rng)).clamp(-1.0, 1.0);
            at_cosine(rng, reference, c)
        })
        .collect();
    EmbeddingSet::new(reference, &frames, tag).expect("unit vectors")
}

fn trajectory(rng: &mut ChaCha8Rng, spec: &FixtureSpec, jitter: f64) -> Vec<Vec<f64>> {
    let dim = 8;
    let start = unit(rng, dim);
    let velocity: Vec<f64> = unit(rng, dim).into_iter().map(|a| 0.1 * a).collect();
    let jitter = (jitter * (1.0 + 0.5 * gauss(rng))).abs() * 0.02;
    (0..spec.frames)
        .map(|k| (0..dim).map(|i| start[i] + k as f64 * velocity[i] + jitter * gauss(rng)).collect())
        .collect()
}

fn frame_stats(rng: &mut ChaCha8Rng, spec: &FixtureSpec, p: &MethodProfile) -> Vec<FrameStats> {
    let shift = 0.04 * gauss(rng);
    (0..spec.frames)
        .map(|_| FrameStats {
            clip: (p.clip + 0.02 * gauss(rng)).clamp(0.0, 1.0),
            noise: (p.noise + 0.02 * gauss(rng)).clamp(0.0, 1.0),
            sharpness: (p.sharpness + shift + 0.02 * gauss(rng)).clamp(0.0, 1.0),
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, bytes)
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec(value).expect("fixture values serialize");
    v.push(b'\n');
    v
}

pub fn sample_id(i: usize) -> String {
    format!("s{:02}", i + 1)
}

/// Writes a complete fixture under `root`. Output depends only on `spec`.
pub fn generate_fixture(root: &Path, spec: &FixtureSpec) -> std::io::Result<FixtureLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = Vec::new();
    let mut jobs = Vec::new();
    let mut external = Vec::new();

    for i in 0..spec.samples {
        let id = sample_id(i);
        let prompt = format!("{} {}.", SUBJECTS[i % SUBJECTS.len()], ACTIONS[(i / SUBJECTS.len()) % ACTIONS.len()]);
        let reference = format!("refs/{id}.png");
        write(&root.join(&reference), format!("synthetic reference image {id}\n").as_bytes())?;
        manifest.push(SampleRecord::new(&id, &prompt, &reference));

        let cur_ref = unit(&mut rng, spec.embedding_dim);
        let arc_ref = unit(&mut rng, spec.embedding_dim);
        for p in &spec.methods {
            let stem = format!("videos/{id}/{}", p.name);
            let cur = embeddings(&mut rng, spec, &cur_ref, p.identity, "curricularface");
            let arc = embeddings(&mut rng, spec, &arc_ref, p.identity - 0.015, "arcface");
            write(&root.join(format!("{stem}.cur.json")), &json(&cur.to_json_file()))?;
            write(&root.join(format!("{stem}.arc.bin")), &arc.to_binary())?;
            let traj = TrajectoryFile { schema_version: SCHEMA_VERSION, frames: trajectory(&mut rng, spec, p.jitter) };
            write(&root.join(format!("{stem}.traj.json")), &json(&traj))?;
            let stats = FrameStatsFile { schema_version: SCHEMA_VERSION, frames: frame_stats(&mut rng, spec, p) };
            write(&root.join(format!("{stem}.stats.json")), &json(&stats))?;
            jobs.push(ScoreJob {
                sample_id: id.clone(),
                method: p.name.clone(),
                cur_embeddings: Some(format!("{stem}.cur.json")),
                arc_embeddings: Some(format!("{stem}.arc.bin")),
                trajectory: Some(format!("{stem}.traj.json")),
                frame_stats: Some(format!("{stem}.stats.json")),
            });
            let gme = (p.gme + 0.02 * gauss(&mut rng)).clamp(0.0, 1.0);
            let clipscore = 29.0 + gauss(&mut rng);
            for (metric, value) in [("gme", gme), ("clipscore", clipscore)] {
                external.push(MetricRow {
                    schema_version: Some(SCHEMA_VERSION),
                    sample_id: id.clone(),
                    method: p.name.clone(),
                    metric: metric.into(),
                    value,
                });
            }
        }
    }

    let layout = FixtureLayout {
        root: root.to_owned(),
        manifest: root.join("manifest.jsonl"),
        jobs: root.join("score_jobs.jsonl"),
        external_metrics: root.join("external_metrics.jsonl"),
    };
    write(&layout.manifest, &jsonl_bytes(None, &manifest))?;
    write(&layout.jobs, &jsonl_bytes(None, &jobs))?;
    write(&layout.external_metrics, &jsonl_bytes(None, &external))?;
    Ok(layout)
}

/// An in-memory candidate table with all five core metrics drawn uniformly
/// from `[0, 1]` around per-method offsets.
pub fn random_candidate_table(rng: &mut impl Rng, methods: usize, samples: usize) -> MetricTable {
    let offsets: Vec<[f64; 5]> =
        (0..methods).map(|_| std::array::from_fn(|_| rng.random_range(-0.2..0.2))).collect();
    let mut t = MetricTable::new();
    for s in 0..samples {
        for (m, off) in offsets.iter().enumerate() {
            let values: [f64; 5] = std::array::from_fn(|k| (rng.random_range(0.0..1.0) + off[k]).clamp(0.0, 1.0));
            let v = MetricVector::from_core(values).expect("values are clamped");
            t.insert_vector(&sample_id(s), &format!("m{m}"), &v).expect("fresh cells");
        }
    }
    t
}
