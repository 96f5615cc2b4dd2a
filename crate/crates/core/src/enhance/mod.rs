//! Prompt and reference-image enhancement.
//!
//! A text model rewrites the raw prompt so that it carries facial cues of the
//! reference (`T -> T_c`), then derives a prompt for regenerating the reference
//! (`T_c -> T_ref`), which an identity-preserving image generator turns into a
//! new reference (`I_ref -> I_ref_c`).

pub mod cache;
#[cfg(feature = "http")]
pub mod http;
pub mod pipeline;
pub mod provider;
pub mod template;
pub mod validate;

use std::path::PathBuf;

use thiserror::Error;

pub use pipeline::{Clock, EnhanceSummary, Enhancer, SampleRecord};
pub use provider::{
    CommandImageGenerator, FnTextProvider, ImageGenerator, MockImageGenerator, MockTextConfig, MockTextProvider,
    ProviderError, ProviderResponse, RetryPolicy, TextProvider, TextRequest,
};
pub use template::{build_ie_instruction, build_pe_instruction, EnhancementKind, EnhancementTemplate};
pub use validate::{validate_pe, validate_ref_prompt, Lexicon, ValidationFailure, ValidationPolicy, ValidationReport};

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("template error: {0}")]
    Template(String),
    #[error("reference unresolvable: {}", .0.display())]
    Unresolvable(PathBuf),
    #[error(transparent)]
    Provider(#[from] provider::RetryExhausted),
    #[error("validation failed ({}): {candidate:?}", report.summary())]
    Validation { report: ValidationReport, candidate: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}
