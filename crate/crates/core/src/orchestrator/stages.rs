use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    emit, json_bytes, relative_to, require, CalibrateArgs, CommonArgs, CosineArg, EnhanceArgs, FixtureArgs,
    ImageGenKind, ProviderKind, ReportArgs, Result, RunError, SampleArgs, ScoreArgs, SelectArgs, Stamped,
};
use crate::artifact::{config_digest, jsonl_bytes, read_json, read_jsonl, ArtifactHeader};
use crate::enhance::cache::{file_digest, ResponseCache};
use crate::enhance::pipeline::resolve_handle;
use crate::enhance::{
    CommandImageGenerator, EnhanceSummary, Enhancer, ImageGenerator, Lexicon, MockImageGenerator, MockTextConfig,
    MockTextProvider, SampleRecord, TextProvider,
};
use crate::fixture::{generate_fixture, FixtureLayout, FixtureSpec};
use crate::guidance::{guided_sample, AnalyticDenoiser, GuidanceConfig, TraceStep};
use crate::metrics::{ingest_metrics, load_jobs, score_jobs, CosinePolicy, MetricTable};
use crate::moe::calibrate::parse_rows;
use crate::moe::{
    calibrate_or_fallback, default_weights, reference_rows, render_table, select_per_sample, CalibrationReport,
    SelectionConfig, SelectionReport, WeightVector, WeightsFile,
};
use crate::testbed::{mode_hit_rate, nearest_mode, ConditionSet, TestbedConfig};

fn digest_of(path: &Path) -> Result<String> {
    file_digest(path).map_err(|e| RunError::data(format!("{}: {e}", path.display())))
}

fn pool(common: &CommonArgs) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.parallelism as usize)
        .build()
        .map_err(|e| RunError::usage(format!("thread pool: {e}")))
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::usage(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::usage(format!("{what} {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::data(format!("{}: {e}", dir.display())))?;
    dir.canonicalize().map_err(|e| RunError::data(format!("{}: {e}", dir.display())))
}

pub fn cmd_enhance(args: &EnhanceArgs) -> Result<EnhanceSummary> {
    let common = &args.common;
    if matches!(args.provider, ProviderKind::Http) && args.provider_config.is_none() {
        return Err(RunError::usage("--provider http needs --provider-config"));
    }
    if matches!(args.imagegen, ImageGenKind::Command) && args.imagegen_config.is_none() {
        return Err(RunError::usage("--imagegen command needs --imagegen-config"));
    }
    if !args.manifest.is_file() {
        return Err(RunError::data(format!("manifest {} not found", args.manifest.display())));
    }
    let (_, records) = read_jsonl::<SampleRecord>(&args.manifest)?;
    let base_dir = args
        .manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .canonicalize()?;
    let out = ensure_dir(&common.out)?;

    let text: Box<dyn TextProvider> = match args.provider {
        ProviderKind::Mock => {
            let cfg = match &args.provider_config {
                Some(p) => read_config::<MockTextConfig>(p, "provider config")?,
                None => MockTextConfig::default(),
            };
            Box::new(MockTextProvider::new(cfg))
        }
        ProviderKind::Http => http_provider(args.provider_config.as_deref())?,
    };
    let image: Box<dyn ImageGenerator> = match args.imagegen {
        ImageGenKind::Mock => Box::new(MockImageGenerator::default()),
        ImageGenKind::Command => {
            let p = args
                .imagegen_config
                .as_deref()
                .ok_or_else(|| RunError::usage("--imagegen command needs --imagegen-config"))?;
            Box::new(read_config::<CommandImageGenerator>(p, "image generator config")?)
        }
    };
    let cache = ResponseCache::open(args.cache.clone().unwrap_or_else(|| out.join("cache")))?;
    let mut enhancer = Enhancer::new(text.as_ref(), image.as_ref(), &cache);
    enhancer.retry.base_delay = Duration::from_millis(args.retry_base_ms);
    if let Some(p) = &args.lexicon {
        enhancer.validation.lexicon = Lexicon::load(p)?;
    }

    let (mut enhanced, summary) = enhancer.enhance_manifest(&records, &base_dir, &out, common.parallelism as usize)?;
    for rec in &mut enhanced {
        let resolved = resolve_handle(&base_dir, &rec.reference_id);
        if Path::new(&rec.reference_id).is_relative() {
            rec.reference_id = relative_to(&resolved, &out).to_string_lossy().into_owned();
        }
    }

    let digest = config_digest(&json!({
        "manifest": digest_of(&args.manifest)?,
        "provider": args.provider,
        "provider_config": args.provider_config.as_deref().map(digest_of).transpose()?,
        "imagegen": args.imagegen,
        "imagegen_config": args.imagegen_config.as_deref().map(digest_of).transpose()?,
        "lexicon": args.lexicon.as_deref().map(digest_of).transpose()?,
    }));
    let header = ArtifactHeader::new("enhance", common.seed, digest);
    emit(&out.join("manifest.enhanced.jsonl"), &jsonl_bytes(Some(&header), &enhanced), common.force)?;

    println!(
        "enhanced {} samples: {} warnings, {} provider calls, {} cache hits",
        summary.samples, summary.warnings, summary.provider_calls, summary.cache_hits
    );
    for rec in enhanced.iter().filter(|r| !r.warnings.is_empty()) {
        for w in &rec.warnings {
            eprintln!("warning: {}: {w}", rec.sample_id);
        }
    }
    if summary.samples > 0 && summary.provider_failures == summary.samples {
        return Err(RunError::provider("the provider failed for every sample"));
    }
    Ok(summary)
}

#[cfg(feature = "http")]
fn http_provider(config: Option<&Path>) -> Result<Box<dyn TextProvider>> {
    use crate::enhance::http::{HttpProviderConfig, HttpTextProvider};
    let p = config.ok_or_else(|| RunError::usage("--provider http needs --provider-config"))?;
    let cfg: HttpProviderConfig = read_config(p, "provider config")?;
    let provider = HttpTextProvider::from_env(cfg).map_err(|e| RunError::provider(e.to_string()))?;
    Ok(Box::new(provider))
}

#[cfg(not(feature = "http"))]
fn http_provider(_config: Option<&Path>) -> Result<Box<dyn TextProvider>> {
    Err(RunError::provider("this build has no HTTP provider (enable the `http` feature)"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub index: usize,
    pub seed: u64,
    pub x: Vec<f64>,
    pub text_class: String,
    pub identity: String,
    pub hit: bool,
}

/// One sampling step of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub step: TraceStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateRow {
    pub w_i: f64,
    pub hits: usize,
    pub count: usize,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateSummary {
    pub target: ConditionSet,
    pub w_c: f64,
    pub rows: Vec<HitRateRow>,
}

fn parse_target(s: &str) -> Result<ConditionSet> {
    let (text, id) = s.split_once('/').ok_or_else(|| RunError::usage(format!("--target {s:?}: expected text/identity")))?;
    if text.is_empty() || id.is_empty() {
        return Err(RunError::usage(format!("--target {s:?}: expected text/identity")));
    }
    Ok(ConditionSet::new(Some(text), Some(id)))
}

fn hit_table(summary: &HitRateSummary) -> String {
    let mut out = String::from("| w_i | hits | count | hit rate |\n|---:|---:|---:|---:|\n");
    for r in &summary.rows {
        writeln!(out, "| {} | {} | {} | {:.4} |", r.w_i, r.hits, r.count, r.hit_rate).unwrap();
    }
    out
}

pub fn cmd_sample(args: &SampleArgs) -> Result<HitRateSummary> {
    let common = &args.common;
    let testbed = match &args.world {
        Some(p) => read_config::<TestbedConfig>(p, "testbed")?,
        None => TestbedConfig::two_identity_demo(),
    };
    let (world, sched) = testbed.build().map_err(|e| RunError::usage(e.to_string()))?;
    let mut guidance = match &args.guidance {
        Some(p) => read_config::<GuidanceConfig>(p, "guidance config")?,
        None => GuidanceConfig::default(),
    };
    if let Some(wc) = args.wc {
        guidance.w_c = wc;
    }
    let target = match (&args.target, &testbed.target) {
        (Some(s), _) => parse_target(s)?,
        (None, Some(t)) => t.clone(),
        (None, None) => return Err(RunError::usage("no target: pass --target or set one in the testbed")),
    };
    world.check_condition(&target).map_err(|e| RunError::usage(e.to_string()))?;
    let sweep = if args.wi_sweep.is_empty() { vec![guidance.w_i] } else { args.wi_sweep.clone() };
    let out = ensure_dir(&common.out)?;
    let denoiser = AnalyticDenoiser::new(world.clone(), sched.clone());
    let pool = pool(common)?;

    let mut rows = Vec::new();
    for &w_i in &sweep {
        let mut cfg = guidance.clone();
        cfg.w_i = w_i;
        cfg.validate().map_err(|e| RunError::usage(e.to_string()))?;
        let runs = pool.install(|| {
            (0..args.count)
                .into_par_iter()
                .map(|i| {
                    let seed = common.seed ^ i as u64;
                    guided_sample(&denoiser, &target, &cfg, &sched, seed).map(|r| (i, seed, r))
                })
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .map_err(|e| RunError::data(e.to_string()))?;

        let finals: Vec<Vec<f64>> = runs.iter().map(|(_, _, r)| r.final_x.clone()).collect();
        let rate = if finals.is_empty() {
            0.0
        } else {
            mode_hit_rate(&finals, &world, &target).map_err(|e| RunError::data(e.to_string()))?
        };
        let mut final_rows = Vec::with_capacity(runs.len());
        for (i, seed, r) in &runs {
            let mode = nearest_mode(&r.final_x, &world)
                .map_err(|e| RunError::data(e.to_string()))?
                .ok_or_else(|| RunError::data("world has no modes"))?;
            final_rows.push(FinalRecord {
                index: *i,
                seed: *seed,
                x: r.final_x.clone(),
                text_class: mode.text_class.clone(),
                identity: mode.identity.clone(),
                hit: Some(&mode.text_class) == target.text_class.as_ref()
                    && Some(&mode.identity) == target.identity.as_ref(),
            });
        }
        let digest = config_digest(&json!({ "testbed": testbed, "guidance": cfg, "target": target, "count": args.count }));
        let header = ArtifactHeader::new("sample", common.seed, digest);
        emit(&out.join(format!("finals_wi{w_i}.jsonl")), &jsonl_bytes(Some(&header), &final_rows), common.force)?;
        if !args.no_traces {
            let traces: Vec<TraceRecord> = runs
                .into_iter()
                .flat_map(|(index, seed, r)| r.trace.into_iter().map(move |step| TraceRecord { index, seed, step }))
                .collect();
            emit(&out.join(format!("traces_wi{w_i}.jsonl")), &jsonl_bytes(Some(&header), &traces), common.force)?;
        }
        let hits = final_rows.iter().filter(|r| r.hit).count();
        rows.push(HitRateRow { w_i, hits, count: args.count, hit_rate: rate });
    }

    let summary = HitRateSummary { target, w_c: guidance.w_c, rows };
    let digest = config_digest(&json!({ "testbed": testbed, "guidance": guidance, "sweep": sweep, "count": args.count }));
    let header = ArtifactHeader::new("sample", common.seed, digest);
    emit(&out.join("hit_rates.json"), &json_bytes(&Stamped { header: &header, body: &summary }), common.force)?;
    print!("{}", hit_table(&summary));
    Ok(summary)
}

pub fn cmd_score(args: &ScoreArgs) -> Result<MetricTable> {
    let common = &args.common;
    if !args.jobs.is_file() {
        return Err(RunError::data(format!("score jobs file {} not found", args.jobs.display())));
    }
    let jobs = load_jobs(&args.jobs)?;
    let base_dir = args.jobs.parent().unwrap_or(Path::new("."));
    let policy = match args.cosine {
        CosineArg::Clamp => CosinePolicy::ClampNegative,
        CosineArg::Affine => CosinePolicy::Affine,
    };
    let mut table = pool(common)?.install(|| score_jobs(&jobs, base_dir, policy))?;
    let mut ingest_digests = Vec::new();
    for p in &args.ingest {
        if !p.is_file() {
            return Err(RunError::data(format!("metrics file {} not found", p.display())));
        }
        table.merge(&ingest_metrics(p)?, args.prefer_local)?;
        ingest_digests.push(digest_of(p)?);
    }
    let out = ensure_dir(&common.out)?;
    let digest = config_digest(&json!({
        "jobs": digest_of(&args.jobs)?,
        "ingest": ingest_digests,
        "prefer_local": args.prefer_local,
        "cosine": args.cosine,
    }));
    let header = ArtifactHeader::new("score", common.seed, digest);
    emit(&out.join("metrics.jsonl"), &jsonl_bytes(Some(&header), &table.rows()), common.force)?;
    println!("scored {} videos over {} samples", table.len(), table.samples.len());
    Ok(table)
}

pub fn cmd_select(args: &SelectArgs) -> Result<SelectionReport> {
    let common = &args.common;
    let metrics = args.metrics.clone().unwrap_or_else(|| common.out.join("metrics.jsonl"));
    require(&metrics, "score")?;
    let table = ingest_metrics(&metrics)?;
    if table.is_empty() {
        return Err(RunError::data(format!("{}: no candidates to select from", metrics.display())));
    }
    let weights = match &args.weights {
        Some(p) => WeightVector::load(p)?,
        None => default_weights(),
    };
    let cfg = SelectionConfig { priority: args.tie_break.clone() };
    let report = select_per_sample(&table, &weights, &cfg);
    for e in &report.exclusions {
        eprintln!("warning: excluded {}: {}", e.sample_id, e.reason);
    }
    if report.per_sample.is_empty() {
        return Err(RunError::data("no sample has a valid candidate"));
    }
    if args.exclusions_fatal && !report.exclusions.is_empty() {
        return Err(RunError::data(format!("{} sample(s) excluded", report.exclusions.len())));
    }
    let out = ensure_dir(&common.out)?;
    let digest = config_digest(&json!({
        "metrics": digest_of(&metrics)?,
        "weights": weights,
        "tie_break": args.tie_break,
    }));
    let header = ArtifactHeader::new("select", common.seed, digest);
    emit(&out.join("selection.json"), &json_bytes(&Stamped { header: &header, body: &report }), common.force)?;
    print!("{}", render_table(&report));
    Ok(report)
}

fn residual_table(report: &CalibrationReport) -> String {
    let mut out = String::from("| Row | Published | Fitted | Residual |\n|---|---:|---:|---:|\n");
    for r in &report.rows {
        writeln!(out, "| {} | {:.4} | {:.4} | {:+.4} |", r.label, r.target, r.fitted, r.residual).unwrap();
    }
    writeln!(
        out,
        "\nmax |residual| {:.6} (tolerance {}), rank {}{}",
        report.max_abs_residual,
        report.tolerance,
        report.rank,
        if report.degenerate { ", degenerate" } else { "" }
    )
    .unwrap();
    out
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<WeightsFile> {
    let common = &args.common;
    let (rows, rows_digest) = match &args.rows {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| RunError::data(format!("{}: {e}", p.display())))?;
            (parse_rows(&text)?, digest_of(p)?)
        }
        None => (reference_rows(), "bundled".to_string()),
    };
    let (weights, report, fell_back) = calibrate_or_fallback(&rows)?;
    let source = if fell_back { "uniform-fallback" } else { "nnls-calibration" };
    let file = WeightsFile::new(weights, source, Some(report.clone()));
    let out = ensure_dir(&common.out)?;
    let header = ArtifactHeader::new("calibrate", common.seed, config_digest(&json!({ "rows": rows_digest })));
    emit(&out.join("weights.json"), &json_bytes(&Stamped { header: &header, body: &file }), common.force)?;
    print!("{}", residual_table(&report));
    if fell_back {
        eprintln!("warning: fit exceeds tolerance; wrote uniform weights");
    }
    Ok(file)
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let common = &args.common;
    let selection_path = args.selection.clone().unwrap_or_else(|| common.out.join("selection.json"));
    require(&selection_path, "select")?;
    let value: Value = read_json(&selection_path)?;
    let report: SelectionReport =
        serde_json::from_value(value.clone()).map_err(|e| RunError::data(format!("{}: {e}", selection_path.display())))?;

    let optional = |explicit: &Option<PathBuf>, name: &str, producer: &str| -> Result<Option<PathBuf>> {
        match explicit {
            Some(p) => require(p, producer).map(|_| Some(p.clone())),
            None => {
                let p = common.out.join(name);
                Ok(p.is_file().then_some(p))
            }
        }
    };
    let hit_path = optional(&args.hit_rates, "hit_rates.json", "sample")?;
    let weights_path = optional(&args.weights, "weights.json", "calibrate")?;

    let mut md = String::new();
    let mut digests = BTreeMap::new();
    digests.insert("selection", digest_of(&selection_path)?);
    md.push_str("# Selection report\n\n");
    md.push_str(&render_table(&report));
    writeln!(md, "\nWeights: {}", serde_json::to_string(&report.weights).expect("weights serialize")).unwrap();
    if !report.tie_break.is_empty() {
        writeln!(md, "Tie-break order: {}", report.tie_break.join(", ")).unwrap();
    }
    if let Some(p) = &weights_path {
        digests.insert("weights", digest_of(p)?);
        let v: Value = read_json(p)?;
        if let Some(cal) = v.get("calibration") {
            let cal: CalibrationReport =
                serde_json::from_value(cal.clone()).map_err(|e| RunError::data(format!("{}: {e}", p.display())))?;
            md.push_str("\n## Weight calibration\n\n");
            md.push_str(&residual_table(&cal));
        }
    }
    if let Some(p) = &hit_path {
        digests.insert("hit_rates", digest_of(p)?);
        let summary: HitRateSummary =
            serde_json::from_value(read_json::<Value>(p)?).map_err(|e| RunError::data(format!("{}: {e}", p.display())))?;
        md.push_str("\n## Testbed identity hit rate\n\n");
        writeln!(
            md,
            "Target {}/{}, w_c = {}\n",
            summary.target.text_class.as_deref().unwrap_or("-"),
            summary.target.identity.as_deref().unwrap_or("-"),
            summary.w_c
        )
        .unwrap();
        md.push_str(&hit_table(&summary));
    }

    let header = ArtifactHeader::new("report", common.seed, config_digest(&digests));
    let text = format!(
        "<!-- schema_version={} seed={} config_digest={} -->\n{md}",
        header.schema_version, header.seed, header.config_digest
    );
    let out = ensure_dir(&common.out)?;
    emit(&out.join("report.md"), text.as_bytes(), common.force)?;
    println!("wrote {}", out.join("report.md").display());
    Ok(text)
}

pub fn cmd_fixture(args: &FixtureArgs) -> Result<FixtureLayout> {
    let spec = FixtureSpec { samples: args.samples, seed: args.common.seed, ..FixtureSpec::default() };
    let out = ensure_dir(&args.common.out)?;
    // Build in a staging directory first so that rerunning with the same
    // settings leaves existing files untouched.
    let staging = out.join(format!(".fixture-staging-{}", std::process::id()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    let result = generate_fixture(&staging, &spec).map_err(RunError::from).and_then(|_| {
        let files = files_under(&staging)?;
        let mut staged = Vec::with_capacity(files.len());
        for rel in files {
            let bytes = std::fs::read(staging.join(&rel))?;
            let dest = out.join(&rel);
            if !args.common.force && dest.exists() && std::fs::read(&dest)? != bytes {
                return Err(RunError::usage(format!(
                    "{} differs from the fixture being generated; pass --force to replace it",
                    dest.display()
                )));
            }
            staged.push((dest, bytes));
        }
        staged.iter().try_for_each(|(dest, bytes)| emit(dest, bytes, true))
    });
    std::fs::remove_dir_all(&staging)?;
    result?;
    println!(
        "wrote {} samples x {} methods to {}",
        spec.samples,
        spec.methods.len(),
        out.display()
    );
    Ok(FixtureLayout {
        root: out.clone(),
        manifest: out.join("manifest.jsonl"),
        jobs: out.join("score_jobs.jsonl"),
        external_metrics: out.join("external_metrics.jsonl"),
    })
}

/// Relative paths of all regular files below `root`, sorted.
fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut pending = vec![PathBuf::new()];
    while let Some(rel) = pending.pop() {
        for entry in std::fs::read_dir(root.join(&rel))? {
            let entry = entry?;
            let child = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                pending.push(child);
            } else {
                out.push(child);
            }
        }
    }
    out.sort();
    Ok(out)
}
