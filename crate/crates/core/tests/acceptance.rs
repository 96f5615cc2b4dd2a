//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{identity_fixtures, pe_accept_cases, pe_mutated_cases, random_rotation, rotate, Oracle};
use idguide::enhance::cache::ResponseCache;
use idguide::enhance::{
    validate_pe, Clock, Enhancer, MockImageGenerator, MockTextProvider, RetryPolicy, SampleRecord, ValidationPolicy,
};
use idguide::fixture::random_candidate_table;
use idguide::guidance::{
    combine_cfg, combine_identity_guidance, guided_sample, make_weak_denoiser, AnalyticDenoiser, DegradationSpec,
    Denoiser, GuidanceConfig,
};
use idguide::metrics::{identity_score, EmbeddingSet};
use idguide::moe::{
    calibrate_or_fallback, overall_score, reference_rows, select_per_sample, SelectionConfig, WeightVector,
};
use idguide::testbed::{mode_hit_rate, score, ConditionSet, NoisySample, TestbedConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn cfg_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tuples: Vec<_> = (0..10_000)
        .map(|_| {
            let dim = rng.random_range(1..17);
            let mut v = || common::gaussian_vec(&mut rng, dim);
            let (full, no_text, weak) = (v(), v(), v());
            (full, no_text, weak, rng.random_range(0.0..20.0))
        })
        .collect();
    let start = Instant::now();
    for (full, no_text, weak, w_c) in &tuples {
        let a = combine_identity_guidance(full, no_text, weak, *w_c, 0.0).map_err(|e| e.to_string())?;
        let b = combine_cfg(full, no_text, *w_c).map_err(|e| e.to_string())?;
        ensure!(
            a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "mismatch at w_c={w_c}: {a:?} vs {b:?}"
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("10000 tuples bitwise equal in {:.1} ms", elapsed.as_secs_f64() * 1e3))
}

fn gradient_decomposition() -> Outcome {
    let (world, sched) = TestbedConfig::two_identity_demo().build().map_err(|e| e.to_string())?;
    let base = AnalyticDenoiser::new(world.clone(), sched.clone());
    let spec = DegradationSpec { temperature: 1.3, ..DegradationSpec::default() };
    let weak = make_weak_denoiser(&base, &spec).map_err(|e| e.to_string())?;
    let cond = ConditionSet::new(Some("sprint"), Some("A"));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_diff, mut worst_fd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let s = NoisySample {
            x: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            t: rng.random_range(0..sched.steps()),
        };
        let ab = sched.alpha_bar(s.t);
        let sigma = sched.sigma(s.t);
        let full = base.predict(&s, &cond).map_err(|e| e.to_string())?;
        let w = weak.predict(&s, &cond).map_err(|e| e.to_string())?;
        let lhs: Vec<f64> = full.iter().zip(&w).map(|(a, b)| a - b).collect();
        let strong = Oracle { world: &world, ab, temperature: 1.0 }.score(&s.x, &cond);
        let weak_score = Oracle { world: &world, ab, temperature: 1.3 }.score(&s.x, &cond.without_identity());
        let rhs: Vec<f64> = strong.iter().zip(&weak_score).map(|(a, b)| -sigma * (a - b)).collect();
        worst_diff = worst_diff.max(rel_err(&lhs, &rhs));

        let oracle = Oracle { world: &world, ab, temperature: 1.0 };
        let h = 1e-5;
        let fd: Vec<f64> = (0..2)
            .map(|k| {
                let (mut up, mut dn) = (s.x.clone(), s.x.clone());
                up[k] += h;
                dn[k] -= h;
                (oracle.density(&up, &cond).ln() - oracle.density(&dn, &cond).ln()) / (2.0 * h)
            })
            .collect();
        let g = score(&s, &cond, &world, &sched, 1.0).map_err(|e| e.to_string())?;
        worst_fd = worst_fd.max(rel_err(&g, &fd));
    }
    ensure!(worst_diff <= 1e-8, "strong-minus-weak rel err {worst_diff:e}");
    ensure!(worst_fd <= 1e-4, "finite-difference rel err {worst_fd:e}");
    Ok(format!("max rel err {worst_diff:.1e} (difference), {worst_fd:.1e} (finite differences)"))
}

fn guidance_efficacy() -> Outcome {
    let testbed = TestbedConfig::two_identity_demo();
    let (world, sched) = testbed.build().map_err(|e| e.to_string())?;
    let target = testbed.target.clone().ok_or("demo has no target")?;
    let denoiser = AnalyticDenoiser::new(world.clone(), sched.clone());
    let start = Instant::now();
    let mut rates = Vec::new();
    for w_i in [0.0, 0.5, 1.0, 2.0] {
        let cfg = GuidanceConfig::new(1.0, w_i).map_err(|e| e.to_string())?;
        let finals: Vec<Vec<f64>> = (0..1000u64)
            .into_par_iter()
            .map(|i| guided_sample(&denoiser, &target, &cfg, &sched, 42 ^ i).map(|r| r.final_x))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        rates.push(mode_hit_rate(&finals, &world, &target).map_err(|e| e.to_string())?);
    }
    let elapsed = start.elapsed();
    let shown = format!("{:?}", rates);
    ensure!(rates.windows(2).all(|w| w[1] >= w[0]), "hit rates not nondecreasing: {shown}");
    ensure!(rates[3] - rates[0] >= 0.05, "gap {:.3} < 0.05: {shown}", rates[3] - rates[0]);
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("hit rates {shown} for w_i 0/0.5/1/2 in {:.1} s", elapsed.as_secs_f64()))
}

fn overall_score_arithmetic() -> Outcome {
    let rows = reference_rows();
    let (w, report, fell_back) = calibrate_or_fallback(&rows).map_err(|e| e.to_string())?;
    if fell_back {
        // documented inconsistency: report every residual, then check the fallback suite
        let detail: Vec<String> = report.rows.iter().map(|r| format!("{} {:+.4}", r.label, r.residual)).collect();
        ensure!(w == WeightVector::uniform(), "fallback weights are not uniform");
        return Ok(format!(
            "calibration rejected (max residual {:.4} > {}); uniform fallback in use; residuals: {}",
            report.max_abs_residual,
            report.tolerance,
            detail.join(", ")
        ));
    }
    let mut worst = 0.0f64;
    for r in &rows {
        let s = overall_score(&r.metrics, &w).map_err(|e| e.to_string())?;
        worst = worst.max((s - r.overall).abs());
        ensure!((s - r.overall).abs() <= 0.02, "{}: {s:.4} vs published {}", r.label, r.overall);
    }
    let baseline = rows.iter().find(|r| r.label == "vace").ok_or("baseline row missing")?;
    Ok(format!(
        "7 rows within 0.02 (max residual {worst:.1e}); baseline {:.4} vs 0.5488",
        overall_score(&baseline.metrics, &w).map_err(|e| e.to_string())?
    ))
}

fn moe_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let methods = rng.random_range(2..8);
        let samples = rng.random_range(5..60);
        let table = random_candidate_table(&mut rng, methods, samples);
        let w = WeightVector::from_array(std::array::from_fn(|_| rng.random_range(0.01..1.0)))
            .map_err(|e| e.to_string())?;
        let report = select_per_sample(&table, &w, &SelectionConfig::default());
        for (m, s) in &report.method_means {
            ensure!(
                report.aggregate.overall >= s.overall - 1e-12,
                "trial {trial}: {m} mean {} beats selection {}",
                s.overall,
                report.aggregate.overall
            );
        }
        let winners: Vec<String> = report.per_sample.iter().map(|s| s.winner.clone()).collect();
        for lambda in [0.1, 1.0, 10.0] {
            let scaled = select_per_sample(&table, &w.scaled(lambda).map_err(|e| e.to_string())?, &SelectionConfig::default());
            let got: Vec<String> = scaled.per_sample.iter().map(|s| s.winner.clone()).collect();
            ensure!(got == winners, "trial {trial}: winners changed under lambda {lambda}");
        }
    }
    Ok("100 random tables: selection dominates every method; winners fixed for lambda 0.1/1/10".into())
}

fn enhance_two(dir: &Path, cache_dir: &Path) -> Result<(String, usize), String> {
    std::fs::create_dir_all(dir.join("refs")).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("refs/a.png"), b"face-a").map_err(|e| e.to_string())?;
    std::fs::write(dir.join("refs/b.png"), b"face-b").map_err(|e| e.to_string())?;
    let records = vec![
        SampleRecord::new("s1", "A woman jogs along a beach at sunrise.", "refs/a.png"),
        SampleRecord::new("s2", "A man plays the violin in a park.", "refs/b.png"),
    ];
    let cache = ResponseCache::open(cache_dir).map_err(|e| e.to_string())?;
    let (text, image) = (MockTextProvider::default(), MockImageGenerator::default());
    let mut e = Enhancer::new(&text, &image, &cache);
    e.retry = RetryPolicy::no_delay(3);
    e.clock = Clock::Fixed(1_700_000_000);
    let (out, summary) = e.enhance_manifest(&records, dir, &dir.join("out"), 2).map_err(|e| e.to_string())?;
    Ok((serde_json::to_string(&out).map_err(|e| e.to_string())?, summary.provider_calls))
}

fn enhancement_validation() -> Outcome {
    let policy = ValidationPolicy::default();
    let accept = pe_accept_cases();
    let reject = pe_mutated_cases();
    ensure!(accept.len() == 50 && reject.len() == 50, "expected 50 cases each");
    for (t, t_c) in &accept {
        let r = validate_pe(t, t_c, &policy);
        ensure!(r.passed(), "rejected verbatim case {t_c:?}: {}", r.summary());
    }
    for (t, t_c) in &reject {
        ensure!(!validate_pe(t, t_c, &policy).passed(), "accepted mutated case {t_c:?}");
    }
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (first, cold_calls) = enhance_two(a.path(), &a.path().join("cache"))?;
    let (other, _) = enhance_two(b.path(), &b.path().join("cache"))?;
    ensure!(first == other, "two cold runs differ");
    let (warm, warm_calls) = enhance_two(a.path(), &a.path().join("cache"))?;
    ensure!(warm == first, "warm rerun changed the manifest");
    ensure!(warm_calls == 0, "warm rerun made {warm_calls} provider calls");
    Ok(format!("50/50 accepted, 50/50 rejected; cold run {cold_calls} calls, warm rerun 0 and identical"))
}

fn identity_metric() -> Outcome {
    for (i, (emb, want)) in identity_fixtures().iter().enumerate() {
        let got = identity_score(emb).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() <= 1e-12, "fixture {i}: {got} vs {want}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let dim = rng.random_range(2..16);
        let n = rng.random_range(1..12);
        let reference = common::gaussian_vec(&mut rng, dim);
        let mut frames: Vec<Vec<f64>> = (0..n).map(|_| common::gaussian_vec(&mut rng, dim)).collect();
        let set = |r: &[f64], f: &[Vec<f64>]| EmbeddingSet::new(r, f, "t").and_then(|e| identity_score(&e));
        let base = set(&reference, &frames).map_err(|e| e.to_string())?;
        frames.shuffle(&mut rng);
        let shuffled = set(&reference, &frames).map_err(|e| e.to_string())?;
        let q = random_rotation(&mut rng, dim);
        let rotated_frames: Vec<Vec<f64>> = frames.iter().map(|f| rotate(&q, f)).collect();
        let rotated = set(&rotate(&q, &reference), &rotated_frames).map_err(|e| e.to_string())?;
        ensure!((base - shuffled).abs() <= 1e-12, "trial {trial}: order changed score");
        ensure!((base - rotated).abs() <= 1e-12, "trial {trial}: rotation changed score");
    }
    Ok("20 fixtures within 1e-12; 1000 order/rotation trials".into())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut pending = vec![PathBuf::new()];
    while let Some(rel) = pending.pop() {
        for entry in std::fs::read_dir(root.join(&rel)).unwrap() {
            let entry = entry.unwrap();
            let child = rel.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                pending.push(child);
            } else {
                out.push(child);
            }
        }
    }
    out.sort();
    out
}

fn end_to_end() -> Outcome {
    let stages: [&[&str]; 6] = [
        &["fixture", "-o", "fx", "--seed", "8", "--samples", "50"],
        &["enhance", "--manifest", "fx/manifest.jsonl", "-o", "run", "--seed", "8"],
        &["sample", "-o", "run", "--seed", "8", "--count", "50", "--wi-sweep", "0,1,2"],
        &["score", "--jobs", "fx/score_jobs.jsonl", "--ingest", "fx/external_metrics.jsonl", "-o", "run", "--seed", "8"],
        &["select", "-o", "run", "--seed", "8"],
        &["report", "-o", "run", "--seed", "8"],
    ];
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut timings = Vec::new();
    for dir in &dirs {
        let start = Instant::now();
        for args in stages {
            let o = common::idguide(args, dir.path(), &[("SOURCE_DATE_EPOCH", "1700000000")]);
            ensure!(o.status.success(), "{args:?} failed: {}", common::stderr(&o));
        }
        timings.push(start.elapsed());
    }
    let (a, b) = (dirs[0].path().join("run"), dirs[1].path().join("run"));
    let files = files_under(&a);
    ensure!(files == files_under(&b), "runs produced different file sets");
    let selection: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("selection.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let selected = selection["per_sample"].as_array().map_or(0, Vec::len);
    let methods = selection["method_means"].as_object().map_or(0, |m| m.len());
    ensure!(selected == 50 && methods == 6, "expected 6 methods x 50 samples, got {methods} x {selected}");
    for rel in &files {
        let (x, y) = (std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap());
        ensure!(x == y, "{} differs between runs", rel.display());
    }
    let slowest = timings.iter().max().copied().unwrap_or_default();
    ensure!(slowest < Duration::from_secs(60), "a run took {slowest:?}");
    Ok(format!(
        "6x50 run in {:.1} s and {:.1} s; {} output files byte-identical",
        timings[0].as_secs_f64(),
        timings[1].as_secs_f64(),
        files.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("CFG reduction", cfg_reduction),
        ("gradient decomposition", gradient_decomposition),
        ("guidance efficacy", guidance_efficacy),
        ("overall score arithmetic", overall_score_arithmetic),
        ("MoE dominance", moe_dominance),
        ("enhancement validation", enhancement_validation),
        ("identity-score metric", identity_metric),
        ("end-to-end smoke", end_to_end),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: {name}: PASS ({detail})", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {}: {name}: FAIL ({reason})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
