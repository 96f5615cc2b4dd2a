//! Checks applied to text returned by the provider.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EnhanceError;

const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.json");

/// Phrase lists used to reject non-facial additions and meta language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub schema_version: u32,
    pub non_facial: Vec<String>,
    pub meta_language: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_LEXICON).expect("bundled lexicon parses")
    }
}

impl Lexicon {
    pub fn load(path: &Path) -> Result<Self, EnhanceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnhanceError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EnhanceError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerbatimMode {
    /// Byte-exact substring.
    Exact,
    /// Whitespace runs collapsed and the prompt's own terminal punctuation ignored.
    #[default]
    Normalized,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationPolicy {
    pub verbatim: VerbatimMode,
    pub lexicon: Lexicon,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "kebab-case")]
pub enum ValidationFailure {
    Empty,
    Verbatim,
    MultiSentence,
    NonFacialAttribute(String),
    MetaLanguage(String),
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationFailure::Empty => write!(f, "empty text"),
            ValidationFailure::Verbatim => write!(f, "original prompt not preserved verbatim"),
            ValidationFailure::MultiSentence => write!(f, "not a single sentence"),
            ValidationFailure::NonFacialAttribute(p) => write!(f, "non-facial attribute: {p:?}"),
            ValidationFailure::MetaLanguage(p) => write!(f, "meta language: {p:?}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        self.failures.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// No line breaks, and sentence punctuation only at the very end.
///
/// A terminator counts as sentence-ending when whitespace and more text follow
/// it, so decimals ("1.5") and a final period are fine.
pub fn is_single_sentence(text: &str) -> bool {
    let text = text.trim();
    if text.is_empty() || text.contains(['\n', '\r']) {
        return false;
    }
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if is_terminator(chars[i]) {
            let mut j = i;
            while j < chars.len() && (is_terminator(chars[j]) || matches!(chars[j], '"' | '\'' | ')')) {
                j += 1;
            }
            if j < chars.len() && chars[j].is_whitespace() {
                return false;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    true
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\'' || c == '#'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// First phrase of `phrases` that occurs in `text` as a whole-word sequence.
fn find_phrase(text: &str, phrases: &[String]) -> Option<String> {
    let tokens = words(text);
    phrases.iter().find_map(|p| {
        let needle = words(p);
        if needle.is_empty() || needle.len() > tokens.len() {
            return None;
        }
        tokens.windows(needle.len()).any(|w| w == needle.as_slice()).then(|| p.clone())
    })
}

fn strip_terminal(s: &str) -> &str {
    s.trim_end_matches(is_terminator).trim_end()
}

/// Locates `prompt` inside `candidate`; returns the text outside the match.
fn locate(prompt: &str, candidate: &str, mode: VerbatimMode) -> Option<String> {
    let (hay, needle) = match mode {
        VerbatimMode::Exact => (candidate.to_owned(), prompt.to_owned()),
        VerbatimMode::Normalized => (
            normalize_whitespace(candidate),
            strip_terminal(&normalize_whitespace(prompt)).to_owned(),
        ),
    };
    if needle.is_empty() {
        return None;
    }
    hay.find(&needle)
        .map(|at| format!("{} {}", &hay[..at], &hay[at + needle.len()..]))
}

/// Checks an enhanced prompt `t_c` against the raw prompt `t`.
pub fn validate_pe(t: &str, t_c: &str, policy: &ValidationPolicy) -> ValidationReport {
    let mut failures = Vec::new();
    if t.trim().is_empty() || t_c.trim().is_empty() {
        failures.push(ValidationFailure::Empty);
        return ValidationReport { failures };
    }
    match locate(t, t_c, policy.verbatim) {
        None => failures.push(ValidationFailure::Verbatim),
        Some(added) => {
            if let Some(p) = find_phrase(&added, &policy.lexicon.non_facial) {
                failures.push(ValidationFailure::NonFacialAttribute(p));
            }
        }
    }
    if !is_single_sentence(t_c) {
        failures.push(ValidationFailure::MultiSentence);
    }
    ValidationReport { failures }
}

/// Checks a reference-image prompt.
pub fn validate_ref_prompt(t_ref: &str, policy: &ValidationPolicy) -> ValidationReport {
    let mut failures = Vec::new();
    if t_ref.trim().is_empty() {
        failures.push(ValidationFailure::Empty);
        return ValidationReport { failures };
    }
    if !is_single_sentence(t_ref) {
        failures.push(ValidationFailure::MultiSentence);
    }
    if let Some(tag) = t_ref.split_whitespace().find(|w| w.starts_with('#')) {
        failures.push(ValidationFailure::MetaLanguage(tag.to_owned()));
    } else if let Some(p) = find_phrase(t_ref, &policy.lexicon.meta_language) {
        failures.push(ValidationFailure::MetaLanguage(p));
    }
    ValidationReport { failures }
}
