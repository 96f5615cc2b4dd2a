//! The `idguide` binary: exit codes, artifact headers, determinism and restartability.

mod common;

use std::path::Path;

use common::{idguide, stderr};

const EPOCH: (&str, &str) = ("SOURCE_DATE_EPOCH", "1700000000");

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = idguide(args, cwd, &[EPOCH]);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(args: &[&str], cwd: &Path) -> (i32, String) {
    let o = idguide(args, cwd, &[EPOCH]);
    (o.status.code().unwrap(), stderr(&o))
}

fn first_line(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

fn run_pipeline(cwd: &Path) {
    ok(&["fixture", "-o", "fx", "--samples", "6", "--seed", "3"], cwd);
    ok(&["enhance", "--manifest", "fx/manifest.jsonl", "-o", "run", "--seed", "3"], cwd);
    ok(&["sample", "-o", "run", "--seed", "3", "--count", "20", "--wi-sweep", "0,1,2"], cwd);
    ok(&[
        "score", "--jobs", "fx/score_jobs.jsonl", "--ingest", "fx/external_metrics.jsonl", "-o", "run", "--seed", "3",
    ], cwd);
    ok(&["calibrate", "-o", "run", "--seed", "3"], cwd);
    ok(&["select", "-o", "run", "--seed", "3", "--weights", "run/weights.json"], cwd);
    ok(&["report", "-o", "run", "--seed", "3"], cwd);
}

const OUTPUTS: [&str; 12] = [
    "manifest.enhanced.jsonl",
    "finals_wi0.jsonl",
    "finals_wi1.jsonl",
    "finals_wi2.jsonl",
    "traces_wi0.jsonl",
    "traces_wi1.jsonl",
    "traces_wi2.jsonl",
    "hit_rates.json",
    "metrics.jsonl",
    "weights.json",
    "selection.json",
    "report.md",
];

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"], dir.path()).0, 0);
    assert_eq!(code(&["--version"], dir.path()).0, 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["frobnicate"], dir.path()).0, 1);
    assert_eq!(code(&["sample", "-o", "x", "--parallelism", "0"], dir.path()).0, 1);
    assert_eq!(code(&["select"], dir.path()).0, 1);
    assert_eq!(code(&["enhance", "--manifest", "m.jsonl", "-o", "x", "--provider", "http"], dir.path()).0, 1);
}

#[test]
fn every_artifact_carries_the_run_header() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let run = dir.path().join("run");
    for name in OUTPUTS {
        let path = run.join(name);
        assert!(path.is_file(), "{name} missing");
        if name.ends_with(".md") {
            let head = std::fs::read_to_string(&path).unwrap();
            let line = head.lines().next().unwrap();
            assert!(line.starts_with("<!-- schema_version=1 seed=3 config_digest="), "{line}");
            continue;
        }
        let header = if name.ends_with(".jsonl") {
            first_line(&path)
        } else {
            serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&path).unwrap()).unwrap()["header"].clone()
        };
        assert_eq!(header["schema_version"], 1, "{name}");
        assert_eq!(header["seed"], 3, "{name}");
        assert_eq!(header["config_digest"].as_str().unwrap().len(), 64, "{name}");
    }
    let report = std::fs::read_to_string(run.join("report.md")).unwrap();
    assert!(report.contains("| Method | Selected |"));
}

#[test]
fn missing_upstream_artifact_names_its_producer() {
    let dir = tempfile::tempdir().unwrap();
    let (c, err) = code(&["select", "-o", "run"], dir.path());
    assert_eq!(c, 2);
    assert!(err.contains("idguide score"), "{err}");
    let (c, err) = code(&["report", "-o", "run"], dir.path());
    assert_eq!(c, 2);
    assert!(err.contains("idguide select"), "{err}");
}

#[test]
fn empty_candidate_set_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let (c, err) = code(&["select", "--metrics", "empty.jsonl", "-o", "run"], dir.path());
    assert_eq!(c, 2, "{err}");
}

#[test]
fn exclusions_fatal_turns_exclusions_into_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [
        r#"{"sample_id": "s1", "method": "a", "metric": "gme", "value": 0.5}"#,
        r#"{"sample_id": "s1", "method": "a", "metric": "cur", "value": 0.5}"#,
        r#"{"sample_id": "s1", "method": "a", "metric": "arc", "value": 0.5}"#,
        r#"{"sample_id": "s1", "method": "a", "metric": "motion", "value": 0.5}"#,
        r#"{"sample_id": "s1", "method": "a", "metric": "imaging", "value": 0.5}"#,
        r#"{"sample_id": "s2", "method": "a", "metric": "cur", "value": 0.5}"#,
    ];
    std::fs::write(dir.path().join("m.jsonl"), rows.join("\n")).unwrap();
    ok(&["select", "--metrics", "m.jsonl", "-o", "lenient"], dir.path());
    let sel: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("lenient/selection.json")).unwrap()).unwrap();
    assert_eq!(sel["exclusions"][0]["sample_id"], "s2");
    let (c, _) = code(&["select", "--metrics", "m.jsonl", "-o", "strict", "--exclusions-fatal"], dir.path());
    assert_eq!(c, 2);
}

#[test]
fn out_of_range_ingest_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["fixture", "-o", "fx", "--samples", "2"], dir.path());
    std::fs::write(
        dir.path().join("bad.jsonl"),
        r#"{"sample_id": "s01", "method": "vace", "metric": "cur", "value": 1.2}"#,
    )
    .unwrap();
    let (c, err) = code(&["score", "--jobs", "fx/score_jobs.jsonl", "--ingest", "bad.jsonl", "-o", "run"], dir.path());
    assert_eq!(c, 2);
    assert!(err.contains("s01") && err.contains("cur"), "{err}");
}

#[test]
fn same_seed_gives_bit_identical_finals() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sample", "-o", "a", "--seed", "11", "--count", "25", "--wi-sweep", "1"], dir.path());
    ok(&["sample", "-o", "b", "--seed", "11", "--count", "25", "--wi-sweep", "1", "--parallelism", "3"], dir.path());
    ok(&["sample", "-o", "c", "--seed", "12", "--count", "25", "--wi-sweep", "1"], dir.path());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("finals_wi1.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn single_step_schedule_runs() {
    let dir = tempfile::tempdir().unwrap();
    let world = r#"{
        "dim": 2,
        "modes": [
            {"text_class": "t", "identity": "A", "mean": [1.0, 0.0], "std": 0.3},
            {"text_class": "t", "identity": "B", "mean": [-1.0, 0.0], "std": 0.3}
        ],
        "prior": [0.5, 0.5],
        "steps": 1,
        "beta_min": 0.5,
        "beta_max": 0.5
    }"#;
    std::fs::write(dir.path().join("world.json"), world).unwrap();
    ok(&["sample", "--world", "world.json", "--target", "t/A", "-o", "run", "--count", "5", "--wi-sweep", "0,2"], dir.path());
    let finals = std::fs::read_to_string(dir.path().join("run/finals_wi2.jsonl")).unwrap();
    assert_eq!(finals.lines().count(), 6);
    let traces = std::fs::read_to_string(dir.path().join("run/traces_wi2.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 6);
}

#[test]
fn sweep_writes_hit_rate_summary() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sample", "-o", "run", "--count", "40", "--wi-sweep", "0,1,2", "--no-traces"], dir.path());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/hit_rates.json")).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r["count"], 40);
    }
    assert!(!dir.path().join("run/traces_wi0.jsonl").exists());
}

#[test]
fn differing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sample", "-o", "run", "--seed", "1", "--count", "5", "--wi-sweep", "1"], dir.path());
    // identical rerun is fine
    ok(&["sample", "-o", "run", "--seed", "1", "--count", "5", "--wi-sweep", "1"], dir.path());
    let before = std::fs::read(dir.path().join("run/finals_wi1.jsonl")).unwrap();
    let (c, err) = code(&["sample", "-o", "run", "--seed", "2", "--count", "5", "--wi-sweep", "1"], dir.path());
    assert_eq!(c, 1);
    assert!(err.contains("--force"), "{err}");
    assert_eq!(std::fs::read(dir.path().join("run/finals_wi1.jsonl")).unwrap(), before);
    ok(&["sample", "-o", "run", "--seed", "2", "--count", "5", "--wi-sweep", "1", "--force"], dir.path());
    assert_ne!(std::fs::read(dir.path().join("run/finals_wi1.jsonl")).unwrap(), before);
}

#[test]
fn deleted_stage_outputs_are_regenerated_without_touching_upstream() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let run = dir.path().join("run");
    let snapshot: Vec<(Vec<u8>, std::time::SystemTime)> = OUTPUTS
        .iter()
        .map(|n| {
            let p = run.join(n);
            (std::fs::read(&p).unwrap(), std::fs::metadata(&p).unwrap().modified().unwrap())
        })
        .collect();
    std::fs::remove_file(run.join("selection.json")).unwrap();
    std::fs::remove_file(run.join("report.md")).unwrap();
    run_pipeline(dir.path());
    for (name, (bytes, mtime)) in OUTPUTS.iter().zip(&snapshot) {
        let p = run.join(name);
        assert_eq!(&std::fs::read(&p).unwrap(), bytes, "{name} changed");
        if !matches!(*name, "selection.json" | "report.md") {
            assert_eq!(&std::fs::metadata(&p).unwrap().modified().unwrap(), mtime, "{name} was rewritten");
        }
    }
}

#[test]
fn enhance_exit_codes_follow_provider_outcome() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["fixture", "-o", "fx", "--samples", "3"], dir.path());
    let manifest = std::fs::read_to_string(dir.path().join("fx/manifest.jsonl")).unwrap();
    let prompts: Vec<String> = manifest
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v["raw_prompt"].as_str().map(str::to_owned))
        .collect();
    assert_eq!(prompts.len(), 3);

    let one = serde_json::json!({"fail_subjects": [prompts[0]]});
    std::fs::write(dir.path().join("one.json"), one.to_string()).unwrap();
    let (c, err) = code(
        &["enhance", "--manifest", "fx/manifest.jsonl", "-o", "partial", "--provider-config", "one.json", "--retry-base-ms", "0"],
        dir.path(),
    );
    assert_eq!(c, 0, "{err}");
    let out = std::fs::read_to_string(dir.path().join("partial/manifest.enhanced.jsonl")).unwrap();
    let failed: serde_json::Value = out
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["raw_prompt"] == prompts[0].as_str())
        .unwrap();
    assert_eq!(failed["enhanced_prompt"], prompts[0].as_str());
    assert!(!failed["warnings"].as_array().unwrap().is_empty());

    let all = serde_json::json!({"fail_subjects": prompts});
    std::fs::write(dir.path().join("all.json"), all.to_string()).unwrap();
    let (c, _) = code(
        &["enhance", "--manifest", "fx/manifest.jsonl", "-o", "none", "--provider-config", "all.json", "--retry-base-ms", "0"],
        dir.path(),
    );
    assert_eq!(c, 3);
}

#[test]
fn enhanced_manifest_points_at_existing_references() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["fixture", "-o", "fx", "--samples", "2"], dir.path());
    ok(&["enhance", "--manifest", "fx/manifest.jsonl", "-o", "run"], dir.path());
    let text = std::fs::read_to_string(dir.path().join("run/manifest.enhanced.jsonl")).unwrap();
    for line in text.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let reference = dir.path().join("run").join(v["reference_id"].as_str().unwrap());
        assert!(reference.is_file(), "{}", reference.display());
        let enhanced = dir.path().join("run").join(v["enhanced_reference"].as_str().unwrap());
        assert!(enhanced.is_file(), "{}", enhanced.display());
    }
}
