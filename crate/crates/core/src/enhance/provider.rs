//! Text-model and image-generator providers.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::EnhancementKind;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{message}")]
pub struct ProviderError {
    pub message: String,
    pub retryable: bool,
}

impl ProviderError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self { message: message.into(), retryable: true }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self { message: message.into(), retryable: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInput {
    pub path: PathBuf,
    pub digest: String,
}

/// One request to a text model. `subject` is the raw prompt the instruction embeds.
#[derive(Debug, Clone, Copy)]
pub struct TextRequest<'a> {
    pub kind: EnhancementKind,
    pub subject: &'a str,
    pub instruction: &'a str,
    pub image: Option<&'a ImageInput>,
}

pub trait TextProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &TextRequest<'_>) -> Result<String, ProviderError>;
}

/// Identity-preserving image generator: writes a regenerated reference to `out`.
pub trait ImageGenerator: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, reference: &Path, prompt: &str, out: &Path) -> Result<(), ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
    pub provider_name: String,
    pub latency_ms: u64,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("provider failed after {attempts} attempt(s): {last}")]
pub struct RetryExhausted {
    pub attempts: u32,
    pub last: ProviderError,
}

impl RetryPolicy {
    pub fn no_delay(attempts: u32) -> Self {
        Self { attempts, base_delay: Duration::ZERO }
    }

    /// Runs `op` until it succeeds, fails non-retryably, or attempts run out.
    /// Waits `base_delay * 2^k` between attempts. Returns the value and the number of attempts made.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<(T, u32), RetryExhausted> {
        let attempts = self.attempts.max(1);
        let mut tried = 0;
        loop {
            tried += 1;
            match op() {
                Ok(v) => return Ok((v, tried)),
                Err(e) if !e.retryable || tried >= attempts => {
                    return Err(RetryExhausted { attempts: tried, last: e });
                }
                Err(e) => {
                    log::debug!("attempt {tried} failed: {e}");
                    let delay = self.base_delay * 2u32.saturating_pow(tried - 1);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
            }
        }
    }
}

/// Deterministic stand-in for a chat model.
///
/// Prompt enhancement appends `clause` to the raw prompt; reference prompts
/// return `reference_sentence`. Any subject listed in `fail_subjects` fails
/// with a retryable error.
#[derive(Debug)]
pub struct MockTextProvider {
    pub clause: String,
    pub reference_sentence: String,
    pub fail_subjects: BTreeSet<String>,
    calls: AtomicUsize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockTextConfig {
    #[serde(default = "default_clause")]
    pub clause: String,
    #[serde(default = "default_reference_sentence")]
    pub reference_sentence: String,
    #[serde(default)]
    pub fail_subjects: BTreeSet<String>,
}

fn default_clause() -> String {
    "who is a person in their 30s with short dark hair and a narrow face".into()
}

fn default_reference_sentence() -> String {
    "A person standing upright with the face fully visible and looking ahead.".into()
}

impl Default for MockTextConfig {
    fn default() -> Self {
        Self {
            clause: default_clause(),
            reference_sentence: default_reference_sentence(),
            fail_subjects: BTreeSet::new(),
        }
    }
}

impl Default for MockTextProvider {
    fn default() -> Self {
        Self::new(MockTextConfig::default())
    }
}

impl MockTextProvider {
    pub fn new(cfg: MockTextConfig) -> Self {
        Self {
            clause: cfg.clause,
            reference_sentence: cfg.reference_sentence,
            fail_subjects: cfg.fail_subjects,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextProvider for MockTextProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &TextRequest<'_>) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let subject = request.subject.trim();
        if self.fail_subjects.contains(subject) {
            return Err(ProviderError::transient(format!("injected failure for {subject:?}")));
        }
        Ok(match request.kind {
            EnhancementKind::Pe => {
                let base = subject.trim_end_matches(['.', '!', '?']);
                format!("{base} {}.", self.clause)
            }
            EnhancementKind::Ie => self.reference_sentence.clone(),
        })
    }
}

/// Provider backed by a closure; handy for scripted tests.
pub struct FnTextProvider<F> {
    name: String,
    f: F,
    calls: AtomicUsize,
}

impl<F> FnTextProvider<F>
where
    F: Fn(&TextRequest<'_>) -> Result<String, ProviderError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> TextProvider for FnTextProvider<F>
where
    F: Fn(&TextRequest<'_>) -> Result<String, ProviderError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &TextRequest<'_>) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(request)
    }
}

/// Copies the reference unchanged.
#[derive(Debug, Default)]
pub struct MockImageGenerator {
    calls: AtomicUsize,
}

impl MockImageGenerator {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ImageGenerator for MockImageGenerator {
    fn name(&self) -> &str {
        "mock-copy"
    }

    fn generate(&self, reference: &Path, _prompt: &str, out: &Path) -> Result<(), ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::fs::copy(reference, out)
            .map(|_| ())
            .map_err(|e| ProviderError::fatal(format!("copy {}: {e}", reference.display())))
    }
}

/// Runs an external program as `program [args..] <reference> <prompt> <out>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandImageGenerator {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ImageGenerator for CommandImageGenerator {
    fn name(&self) -> &str {
        self.program.to_str().unwrap_or("command")
    }

    fn generate(&self, reference: &Path, prompt: &str, out: &Path) -> Result<(), ProviderError> {
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(reference)
            .arg(prompt)
            .arg(out)
            .status()
            .map_err(|e| ProviderError::fatal(format!("spawn {}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(ProviderError::transient(format!("{} exited with {status}", self.program.display())));
        }
        if !out.exists() {
            return Err(ProviderError::fatal(format!("{} wrote no output", self.program.display())));
        }
        Ok(())
    }
}
