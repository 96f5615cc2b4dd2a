//! Command-line entry point: enhance, sample, score, select, calibrate, report.
//!
//! Exit codes: 0 success (warnings allowed), 1 usage, 2 data, 3 provider.

mod stages;

use std::ffi::OsString;
use std::path::{Component, Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::artifact::{write_atomic, ArtifactError, ArtifactHeader};
use crate::enhance::EnhanceError;
use crate::metrics::MetricsError;
use crate::moe::MoeError;

pub use stages::{cmd_calibrate, cmd_enhance, cmd_fixture, cmd_report, cmd_sample, cmd_score, cmd_select};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Provider = 3,
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct RunError {
    pub kind: ExitKind,
    pub message: String,
}

impl RunError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Data, message: message.into() }
    }

    pub fn provider(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Provider, message: message.into() }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl From<MetricsError> for RunError {
    fn from(e: MetricsError) -> Self {
        RunError::data(e.to_string())
    }
}

impl From<MoeError> for RunError {
    fn from(e: MoeError) -> Self {
        RunError::data(e.to_string())
    }
}

impl From<ArtifactError> for RunError {
    fn from(e: ArtifactError) -> Self {
        RunError::data(e.to_string())
    }
}

impl From<EnhanceError> for RunError {
    fn from(e: EnhanceError) -> Self {
        match e {
            EnhanceError::Provider(_) => RunError::provider(e.to_string()),
            EnhanceError::Config(_) => RunError::usage(e.to_string()),
            _ => RunError::data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

#[derive(Debug, Parser)]
#[command(name = "idguide", version, about = "Identity-aware guidance, prompt enhancement and best-of-N selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance prompts and reference images listed in a manifest.
    Enhance(EnhanceArgs),
    /// Run guided sampling in the analytic testbed.
    Sample(SampleArgs),
    /// Compute per-video metrics from score jobs and merge ingested values.
    Score(ScoreArgs),
    /// Pick the best method per sample by overall score.
    Select(SelectArgs),
    /// Fit metric weights to published method rows.
    Calibrate(CalibrateArgs),
    /// Render a markdown report from earlier stage outputs.
    Report(ReportArgs),
    /// Write a synthetic evaluation workspace.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Run seed, recorded in every artifact.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace existing outputs that differ from the new ones.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub parallelism: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageGenKind {
    Mock,
    Command,
}

#[derive(Debug, Clone, Args)]
pub struct EnhanceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSONL manifest of {sample_id, raw_prompt, reference_id}.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ProviderKind::Mock)]
    pub provider: ProviderKind,
    /// JSON settings for the text provider.
    #[arg(long)]
    pub provider_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ImageGenKind::Mock)]
    pub imagegen: ImageGenKind,
    /// JSON settings for the image generator ({program, args}).
    #[arg(long)]
    pub imagegen_config: Option<PathBuf>,
    /// Response cache directory (default: <out>/cache).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Phrase lists for validation (default: bundled).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// First retry delay; later retries double it.
    #[arg(long, default_value_t = 250)]
    pub retry_base_ms: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Testbed JSON (default: the two-identity demo world).
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Guidance JSON (default: built-in defaults).
    #[arg(long)]
    pub guidance: Option<PathBuf>,
    /// Override the text guidance weight.
    #[arg(long)]
    pub wc: Option<f64>,
    /// Identity guidance weights to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub wi_sweep: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Target condition as `text_class/identity`.
    #[arg(long)]
    pub target: Option<String>,
    /// Skip writing per-step traces.
    #[arg(long)]
    pub no_traces: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CosineArg {
    Clamp,
    Affine,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSONL score jobs.
    #[arg(long)]
    pub jobs: PathBuf,
    /// Externally computed metrics (JSONL); may repeat.
    #[arg(long)]
    pub ingest: Vec<PathBuf>,
    /// On conflict keep the locally computed value instead of failing.
    #[arg(long)]
    pub prefer_local: bool,
    #[arg(long, value_enum, default_value_t = CosineArg::Clamp)]
    pub cosine: CosineArg,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Metrics JSONL (default: <out>/metrics.jsonl).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Weights JSON (default: bundled calibrated weights).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Method priority for exact ties, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tie_break: Vec<String>,
    /// Fail when any sample has no valid candidate.
    #[arg(long)]
    pub exclusions_fatal: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Rows JSON (default: bundled published rows).
    #[arg(long)]
    pub rows: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Selection JSON (default: <out>/selection.json).
    #[arg(long)]
    pub selection: Option<PathBuf>,
    /// Hit-rate summary (default: <out>/hit_rates.json if present).
    #[arg(long)]
    pub hit_rates: Option<PathBuf>,
    /// Weights file with calibration report (default: <out>/weights.json if present).
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Enhance(a) => cmd_enhance(a).map(|_| ()),
        Command::Sample(a) => cmd_sample(a).map(|_| ()),
        Command::Score(a) => cmd_score(a).map(|_| ()),
        Command::Select(a) => cmd_select(a).map(|_| ()),
        Command::Calibrate(a) => cmd_calibrate(a).map(|_| ()),
        Command::Report(a) => cmd_report(a).map(|_| ()),
        Command::Fixture(a) => cmd_fixture(a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

/// Writes `bytes` atomically. An existing file with identical content is left
/// alone; one with different content is replaced only when `force` is set.
pub(crate) fn emit(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(());
        }
        if !force {
            return Err(RunError::usage(format!(
                "{} already exists with different content; pass --force to replace it",
                path.display()
            )));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, bytes).map_err(|e| RunError::data(format!("{}: {e}", path.display())))
}

/// JSON artifact body with the run header alongside.
#[derive(Serialize)]
pub(crate) struct Stamped<'a, T: Serialize> {
    pub header: &'a ArtifactHeader,
    #[serde(flatten)]
    pub body: &'a T,
}

pub(crate) fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

/// Fails with a pointer to the producing command when an upstream artifact is absent.
pub(crate) fn require(path: &Path, producer: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(RunError::data(format!("{} not found; produce it with `idguide {producer}`", path.display())))
    }
}

/// `target` expressed relative to directory `base`. Both must be absolute.
pub(crate) fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}
