//! On-disk artifacts: atomic writes and JSONL files with a header record.
//!
//! Every artifact starts with a header carrying the schema version, the run
//! seed and a digest of the configuration that produced it. In JSONL files the
//! header is the first line and is marked with `"record": "header"`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enhance::cache::sha256_hex;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Schema { path: PathBuf, found: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub record: String,
    pub schema_version: u32,
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
}

impl ArtifactHeader {
    pub fn new(stage: &str, seed: u64, config_digest: String) -> Self {
        Self {
            record: "header".into(),
            schema_version: SCHEMA_VERSION,
            stage: stage.into(),
            seed,
            config_digest,
        }
    }
}

/// SHA-256 over the canonical JSON of `config`.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.tmp.{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn jsonl_bytes<T: Serialize>(header: Option<&ArtifactHeader>, rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    if let Some(h) = header {
        serde_json::to_writer(&mut out, h).expect("header serializes");
        out.push(b'\n');
    }
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &ArtifactHeader, rows: &[T]) -> Result<(), ArtifactError> {
    write_atomic(path, &jsonl_bytes(Some(header), rows))
        .map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

/// Reads a JSONL file; the header line is optional for hand-written inputs.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<ArtifactHeader>, Vec<T>), ArtifactError> {
    let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io { path: path.to_owned(), source })?;
    let mut header = None;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| ArtifactError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(parse_err)?;
        if value.get("record").and_then(|r| r.as_str()) == Some("header") {
            let h: ArtifactHeader = serde_json::from_value(value).map_err(parse_err)?;
            if h.schema_version != SCHEMA_VERSION {
                return Err(ArtifactError::Schema { path: path.to_owned(), found: h.schema_version });
            }
            header = Some(h);
            continue;
        }
        rows.push(serde_json::from_value(value).map_err(parse_err)?);
    }
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|source| ArtifactError::Io { path: path.to_owned(), source })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io { path: path.to_owned(), source })?;
    serde_json::from_str(&text).map_err(|e| ArtifactError::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}
