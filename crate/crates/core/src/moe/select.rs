//! Per-sample argmax over candidate methods.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{overall_score, WeightVector};
use crate::metrics::{CoreMetric, MetricTable, MetricVector};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Methods earlier in the list win exact ties. Unlisted methods rank
    /// after listed ones, in name order.
    pub priority: Vec<String>,
}

impl SelectionConfig {
    pub fn new(priority: &[&str]) -> Self {
        Self { priority: priority.iter().map(|s| s.to_string()).collect() }
    }

    fn rank(&self, method: &str) -> usize {
        self.priority.iter().position(|p| p == method).unwrap_or(self.priority.len())
    }

    /// Orders methods by tie-break rank, then name.
    pub fn order<'a>(&self, methods: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        let mut out: Vec<String> = methods.into_iter().cloned().collect();
        out.sort_by(|a, b| self.rank(a).cmp(&self.rank(b)).then_with(|| a.cmp(b)));
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSelection {
    pub sample_id: String,
    pub winner: String,
    pub score: f64,
    pub scores: BTreeMap<String, f64>,
    /// Candidates skipped for missing metrics, with the reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub invalid: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reason: String,
}

/// Per-metric means and mean overall score over a set of videos.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub count: usize,
    pub means: BTreeMap<String, f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub weights: WeightVector,
    pub tie_break: Vec<String>,
    pub per_sample: Vec<SampleSelection>,
    /// Means over the selected videos only.
    pub aggregate: MethodSummary,
    pub method_usage: BTreeMap<String, usize>,
    /// Means of each method over the samples where it was a valid candidate.
    pub method_means: BTreeMap<String, MethodSummary>,
    pub exclusions: Vec<Exclusion>,
}

struct Accumulator {
    count: usize,
    sums: BTreeMap<CoreMetric, (f64, usize)>,
    overall: f64,
}

impl Accumulator {
    fn new() -> Self {
        Self { count: 0, sums: BTreeMap::new(), overall: 0.0 }
    }

    fn add(&mut self, m: &MetricVector, score: f64) {
        self.count += 1;
        self.overall += score;
        for k in CoreMetric::ALL {
            if let Some(v) = m.get(k) {
                let e = self.sums.entry(k).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }

    fn finish(self) -> MethodSummary {
        if self.count == 0 {
            return MethodSummary::default();
        }
        MethodSummary {
            count: self.count,
            means: self.sums.into_iter().map(|(k, (s, n))| (k.key().to_string(), s / n as f64)).collect(),
            overall: self.overall / self.count as f64,
        }
    }
}

enum Outcome {
    Selected(SampleSelection),
    Excluded(Exclusion),
}

fn select_one(
    sample_id: &str,
    methods: &BTreeMap<String, MetricVector>,
    w: &WeightVector,
    cfg: &SelectionConfig,
) -> Outcome {
    let mut scores = BTreeMap::new();
    let mut invalid = BTreeMap::new();
    for (method, m) in methods {
        match overall_score(m, w) {
            Ok(s) => {
                scores.insert(method.clone(), s);
            }
            Err(e) => {
                invalid.insert(method.clone(), e.to_string());
            }
        }
    }
    let best = cfg
        .order(scores.keys())
        .into_iter()
        .fold(None::<(String, f64)>, |acc, m| {
            let s = scores[&m];
            match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((m, s)),
            }
        });
    match best {
        Some((winner, score)) => Outcome::Selected(SampleSelection {
            sample_id: sample_id.into(),
            winner,
            score,
            scores,
            invalid,
        }),
        None => Outcome::Excluded(Exclusion {
            sample_id: sample_id.into(),
            reason: if invalid.is_empty() {
                "no candidates".into()
            } else {
                invalid.iter().map(|(m, e)| format!("{m}: {e}")).collect::<Vec<_>>().join("; ")
            },
        }),
    }
}

/// Picks, for every sample, the method with the highest overall score.
/// Samples without a valid candidate are listed in `exclusions`.
pub fn select_per_sample(candidates: &MetricTable, w: &WeightVector, cfg: &SelectionConfig) -> SelectionReport {
    let entries: Vec<(&String, &BTreeMap<String, MetricVector>)> = candidates.samples.iter().collect();
    let outcomes: Vec<Outcome> = entries.par_iter().map(|(s, methods)| select_one(s, methods, w, cfg)).collect();

    let mut per_sample = Vec::new();
    let mut exclusions = Vec::new();
    let mut winners = Accumulator::new();
    let mut usage: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_method: BTreeMap<String, Accumulator> = BTreeMap::new();
    for ((_, methods), outcome) in entries.iter().zip(outcomes) {
        match outcome {
            Outcome::Selected(sel) => {
                winners.add(&methods[&sel.winner], sel.score);
                *usage.entry(sel.winner.clone()).or_default() += 1;
                for (method, score) in &sel.scores {
                    per_method.entry(method.clone()).or_insert_with(Accumulator::new).add(&methods[method], *score);
                }
                per_sample.push(sel);
            }
            Outcome::Excluded(ex) => exclusions.push(ex),
        }
    }
    SelectionReport {
        weights: w.clone(),
        tie_break: cfg.priority.clone(),
        per_sample,
        aggregate: winners.finish(),
        method_usage: usage,
        method_means: per_method.into_iter().map(|(k, a)| (k, a.finish())).collect(),
        exclusions,
    }
}
