//! Per-sample enhancement: `T -> T_c -> T_ref -> I_ref_c`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{cache_key, file_digest, CacheEntry, Provenance, ResponseCache, CACHE_SCHEMA_VERSION};
use super::provider::{ImageGenerator, ImageInput, ProviderResponse, RetryPolicy, TextProvider, TextRequest};
use super::template::{build_ie_instruction, build_pe_instruction, EnhancementKind};
use super::validate::{validate_pe, validate_ref_prompt, ValidationPolicy};
use super::EnhanceError;

/// One test pair and whatever enhancement has produced for it so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub raw_prompt: String,
    pub reference_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhanced_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_image_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhanced_reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SampleRecord {
    pub fn new(sample_id: &str, raw_prompt: &str, reference_id: &str) -> Self {
        Self {
            sample_id: sample_id.into(),
            raw_prompt: raw_prompt.into(),
            reference_id: reference_id.into(),
            enhanced_prompt: None,
            ref_image_prompt: None,
            enhanced_reference: None,
            provenance: None,
            warnings: Vec::new(),
        }
    }
}

/// Rejects duplicate ids and empty prompts.
pub fn check_manifest(records: &[SampleRecord]) -> Result<(), EnhanceError> {
    let mut seen = BTreeSet::new();
    for r in records {
        if r.raw_prompt.trim().is_empty() {
            return Err(EnhanceError::Manifest(format!("sample {:?} has an empty prompt", r.sample_id)));
        }
        if !seen.insert(r.sample_id.as_str()) {
            return Err(EnhanceError::Manifest(format!("duplicate sample_id {:?}", r.sample_id)));
        }
    }
    Ok(())
}

/// Source of provenance timestamps. `SOURCE_DATE_EPOCH` pins it for reproducible runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Fixed(i64),
}

impl Clock {
    pub fn from_env() -> Self {
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .map_or(Clock::System, Clock::Fixed)
    }

    pub fn now_rfc3339(&self) -> String {
        let ts = match self {
            Clock::System => chrono::Utc::now(),
            Clock::Fixed(secs) => chrono::DateTime::from_timestamp(*secs, 0).unwrap_or_default(),
        };
        ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptOutcome {
    pub enhanced: String,
    pub response: ProviderResponse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceOutcome {
    /// Handle of the regenerated image, relative to the output directory.
    pub handle: String,
    pub provenance: Provenance,
    pub cached: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceSummary {
    pub samples: usize,
    pub warnings: usize,
    pub provider_calls: usize,
    pub cache_hits: usize,
    pub provider_failures: usize,
}

/// Everything the enhancement steps need: providers, cache and policies.
pub struct Enhancer<'a> {
    pub text: &'a dyn TextProvider,
    pub image: &'a dyn ImageGenerator,
    pub cache: &'a ResponseCache,
    pub retry: RetryPolicy,
    pub validation: ValidationPolicy,
    pub clock: Clock,
    provider_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl<'a> Enhancer<'a> {
    pub fn new(text: &'a dyn TextProvider, image: &'a dyn ImageGenerator, cache: &'a ResponseCache) -> Self {
        Self {
            text,
            image,
            cache,
            retry: RetryPolicy::default(),
            validation: ValidationPolicy::default(),
            clock: Clock::from_env(),
            provider_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    /// Provider invocations made so far, retries included.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    fn cached_text(
        &self,
        key: &str,
        request: &TextRequest<'_>,
    ) -> Result<ProviderResponse, EnhanceError> {
        let start = Instant::now();
        if let Some(hit) = self.cache.get(key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(ProviderResponse {
                text: hit.text,
                provider_name: hit.provider_name,
                latency_ms: start.elapsed().as_millis() as u64,
                cached: true,
            });
        }
        let (text, _) = self
            .retry
            .run(|| {
                self.provider_calls.fetch_add(1, Ordering::SeqCst);
                self.text.complete(request)
            })
            .map_err(EnhanceError::Provider)?;
        let text = text.trim().to_owned();
        if text.is_empty() {
            return Err(EnhanceError::Provider(super::provider::RetryExhausted {
                attempts: 1,
                last: super::provider::ProviderError::fatal("provider returned empty text"),
            }));
        }
        self.cache.put(
            key,
            &CacheEntry {
                schema_version: CACHE_SCHEMA_VERSION,
                provider_name: self.text.name().to_owned(),
                text: text.clone(),
                provenance: None,
            },
        )?;
        Ok(ProviderResponse {
            text,
            provider_name: self.text.name().to_owned(),
            latency_ms: start.elapsed().as_millis() as u64,
            cached: false,
        })
    }

    /// `T` plus reference face -> validated `T_c`. Cached by `(T, image digest)`.
    pub fn enhance_prompt(&self, prompt: &str, reference: &Path) -> Result<PromptOutcome, EnhanceError> {
        let prompt = prompt.trim();
        let instruction = build_pe_instruction(prompt)?;
        let digest = file_digest(reference).map_err(|_| EnhanceError::Unresolvable(reference.to_owned()))?;
        let image = ImageInput { path: reference.to_owned(), digest: digest.clone() };
        let request = TextRequest { kind: EnhancementKind::Pe, subject: prompt, instruction: &instruction, image: Some(&image) };
        let key = cache_key("pe", &[self.text.name(), prompt, &digest]);
        let response = self.cached_text(&key, &request)?;
        let report = validate_pe(prompt, &response.text, &self.validation);
        if !report.passed() {
            return Err(EnhanceError::Validation { report, candidate: response.text });
        }
        Ok(PromptOutcome { enhanced: response.text.clone(), response })
    }

    /// `T_c` -> validated `T_ref`. Cached by the digest of `T_c`.
    pub fn derive_ref_prompt(&self, enhanced_prompt: &str) -> Result<PromptOutcome, EnhanceError> {
        let enhanced_prompt = enhanced_prompt.trim();
        let instruction = build_ie_instruction(enhanced_prompt)?;
        let request = TextRequest { kind: EnhancementKind::Ie, subject: enhanced_prompt, instruction: &instruction, image: None };
        let key = cache_key("ie", &[self.text.name(), enhanced_prompt]);
        let response = self.cached_text(&key, &request)?;
        let report = validate_ref_prompt(&response.text, &self.validation);
        if !report.passed() {
            return Err(EnhanceError::Validation { report, candidate: response.text });
        }
        Ok(PromptOutcome { enhanced: response.text.clone(), response })
    }

    /// Regenerates the reference under `out_dir/references/<sample_id>.<ext>`.
    pub fn enhance_reference(
        &self,
        sample_id: &str,
        reference: &Path,
        ref_prompt: &str,
        out_dir: &Path,
    ) -> Result<ReferenceOutcome, EnhanceError> {
        if !reference.is_file() {
            return Err(EnhanceError::Unresolvable(reference.to_owned()));
        }
        let source_digest = file_digest(reference).map_err(|_| EnhanceError::Unresolvable(reference.to_owned()))?;
        let ext = reference.extension().and_then(|e| e.to_str()).unwrap_or("img");
        let handle = format!("references/{sample_id}.{ext}");
        let out = out_dir.join(&handle);
        std::fs::create_dir_all(out.parent().expect("has parent")).map_err(|e| EnhanceError::Io(e.to_string()))?;
        let key = cache_key("ref", &[self.image.name(), &source_digest, ref_prompt.trim()]);

        if let Some(hit) = self.cache.get(&key) {
            if let Some(prov) = hit.provenance {
                let blob = self.cache.blob_path(&prov.output_digest);
                if blob.is_file() {
                    self.cache_hits.fetch_add(1, Ordering::SeqCst);
                    std::fs::copy(&blob, &out).map_err(|e| EnhanceError::Io(e.to_string()))?;
                    return Ok(ReferenceOutcome { handle, provenance: prov, cached: true });
                }
            }
        }

        self.retry
            .run(|| {
                self.provider_calls.fetch_add(1, Ordering::SeqCst);
                self.image.generate(reference, ref_prompt.trim(), &out)
            })
            .map_err(EnhanceError::Provider)?;
        let output_digest = self.cache.put_blob(&out)?;
        let provenance = Provenance {
            source_digest,
            output_digest: output_digest.clone(),
            ref_prompt: ref_prompt.trim().to_owned(),
            provider: self.image.name().to_owned(),
            generated_at: self.clock.now_rfc3339(),
        };
        self.cache.put(
            &key,
            &CacheEntry {
                schema_version: CACHE_SCHEMA_VERSION,
                provider_name: self.image.name().to_owned(),
                text: output_digest,
                provenance: Some(provenance.clone()),
            },
        )?;
        Ok(ReferenceOutcome { handle, provenance, cached: false })
    }

    /// Runs all three steps for one record. Failures degrade to warnings:
    /// a failed prompt enhancement keeps `T_c = T`.
    pub fn enhance_record(&self, record: &SampleRecord, base_dir: &Path, out_dir: &Path) -> (SampleRecord, bool) {
        let mut rec = record.clone();
        rec.warnings.clear();
        let mut provider_failed = false;
        let reference = resolve_handle(base_dir, &rec.reference_id);
        let id = rec.sample_id.clone();

        let t_c = match self.enhance_prompt(&rec.raw_prompt, &reference) {
            Ok(o) => o.enhanced,
            Err(e) => {
                provider_failed |= matches!(e, EnhanceError::Provider(_));
                log::warn!("{id}: prompt enhancement failed: {e}");
                rec.warnings.push(format!("prompt enhancement: {e}"));
                rec.raw_prompt.trim().to_owned()
            }
        };
        rec.enhanced_prompt = Some(t_c.clone());

        match self.derive_ref_prompt(&t_c) {
            Ok(o) => rec.ref_image_prompt = Some(o.enhanced),
            Err(e) => {
                provider_failed |= matches!(e, EnhanceError::Provider(_));
                log::warn!("{id}: reference prompt failed: {e}");
                rec.warnings.push(format!("reference prompt: {e}"));
                rec.ref_image_prompt = None;
            }
        }

        rec.enhanced_reference = None;
        rec.provenance = None;
        if let Some(t_ref) = rec.ref_image_prompt.clone() {
            match self.enhance_reference(&id, &reference, &t_ref, out_dir) {
                Ok(o) => {
                    rec.enhanced_reference = Some(o.handle);
                    rec.provenance = Some(o.provenance);
                }
                Err(e) => {
                    provider_failed |= matches!(e, EnhanceError::Provider(_));
                    log::warn!("{id}: reference enhancement failed: {e}");
                    rec.warnings.push(format!("reference enhancement: {e}"));
                }
            }
        }
        (rec, provider_failed)
    }

    /// Enhances every record, up to `parallelism` at a time. Output order matches input order.
    pub fn enhance_manifest(
        &self,
        records: &[SampleRecord],
        base_dir: &Path,
        out_dir: &Path,
        parallelism: usize,
    ) -> Result<(Vec<SampleRecord>, EnhanceSummary), EnhanceError> {
        check_manifest(records)?;
        let calls_before = self.provider_calls();
        let hits_before = self.cache_hits();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .map_err(|e| EnhanceError::Config(e.to_string()))?;
        let results: Vec<(SampleRecord, bool)> =
            pool.install(|| records.par_iter().map(|r| self.enhance_record(r, base_dir, out_dir)).collect());
        let summary = EnhanceSummary {
            samples: results.len(),
            warnings: results.iter().map(|(r, _)| r.warnings.len()).sum(),
            provider_calls: self.provider_calls() - calls_before,
            cache_hits: self.cache_hits() - hits_before,
            provider_failures: results.iter().filter(|(_, f)| *f).count(),
        };
        Ok((results.into_iter().map(|(r, _)| r).collect(), summary))
    }
}

/// Relative handles resolve against `base_dir`.
pub fn resolve_handle(base_dir: &Path, handle: &str) -> PathBuf {
    let p = Path::new(handle);
    if p.is_absolute() { p.to_owned() } else { base_dir.join(p) }
}
