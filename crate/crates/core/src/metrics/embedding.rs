//! Face / text-video embeddings and the cosine identity score.
//!
//! Two file formats are read:
//!
//! * JSON: `{"schema_version": 1, "space_tag": "...", "dim": d, "reference": [..], "frames": [[..], ..]}`
//! * binary: magic `EMB1`, then little-endian `u32` schema_version, dim, frame
//!   count and tag length, the UTF-8 tag, and `(1 + count) * dim` `f32` values
//!   with the reference first.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};
use crate::artifact::SCHEMA_VERSION;

pub const BINARY_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    reference: Vec<f64>,
    frames: Vec<Vec<f64>>,
    space_tag: String,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(MetricsError::Input("embedding has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|a| a / n).collect())
}

impl EmbeddingSet {
    /// Normalizes every vector to unit length.
    pub fn new(reference: &[f64], frames: &[Vec<f64>], space_tag: &str) -> Result<Self> {
        let dim = reference.len();
        if dim == 0 {
            return Err(MetricsError::Input("empty reference embedding".into()));
        }
        let frames = frames
            .iter()
            .map(|f| {
                if f.len() != dim {
                    return Err(MetricsError::Dimension { expected: dim, got: f.len() });
                }
                normalized(f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { reference: normalized(reference)?, frames, space_tag: space_tag.into() })
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn space_tag(&self) -> &str {
        &self.space_tag
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
        if bytes.starts_with(BINARY_MAGIC) {
            decode_binary(&bytes).map_err(|e| file_err(path, e))
        } else {
            let file: EmbeddingFile = serde_json::from_slice(&bytes).map_err(|e| file_err(path, e))?;
            file.into_set().map_err(|e| file_err(path, e))
        }
    }

    pub fn to_json_file(&self) -> EmbeddingFile {
        EmbeddingFile {
            schema_version: SCHEMA_VERSION,
            space_tag: self.space_tag.clone(),
            dim: self.dim(),
            reference: self.reference.clone(),
            frames: self.frames.clone(),
        }
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BINARY_MAGIC);
        for v in [SCHEMA_VERSION, self.dim() as u32, self.frames.len() as u32, self.space_tag.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(self.space_tag.as_bytes());
        for v in std::iter::once(&self.reference).chain(&self.frames) {
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> MetricsError {
    MetricsError::File { path: path.to_owned(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub schema_version: u32,
    pub space_tag: String,
    pub dim: usize,
    pub reference: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
}

impl EmbeddingFile {
    pub fn into_set(self) -> Result<EmbeddingSet> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(MetricsError::Input(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.reference.len() != self.dim {
            return Err(MetricsError::Dimension { expected: self.dim, got: self.reference.len() });
        }
        EmbeddingSet::new(&self.reference, &self.frames, &self.space_tag)
    }
}

fn decode_binary(bytes: &[u8]) -> Result<EmbeddingSet> {
    let short = || MetricsError::Input("truncated binary embedding file".into());
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(short)
    };
    let version = word(4)?;
    if version != SCHEMA_VERSION {
        return Err(MetricsError::Input(format!("unsupported schema_version {version}")));
    }
    let dim = word(8)? as usize;
    let count = word(12)? as usize;
    let tag_len = word(16)? as usize;
    let tag_end = 20 + tag_len;
    let tag = std::str::from_utf8(bytes.get(20..tag_end).ok_or_else(short)?)
        .map_err(|e| MetricsError::Input(format!("space tag: {e}")))?;
    let expected = tag_end + (count + 1) * dim * 4;
    if bytes.len() != expected {
        return Err(MetricsError::Input(format!(
            "binary embedding has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[tag_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut rows = floats.chunks_exact(dim.max(1)).map(<[f64]>::to_vec);
    let reference = rows.next().ok_or_else(short)?;
    let frames: Vec<Vec<f64>> = rows.collect();
    EmbeddingSet::new(&reference, &frames, tag)
}

/// How a negative cosine maps into `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosinePolicy {
    /// `max(0, cos)`.
    #[default]
    ClampNegative,
    /// `(1 + cos) / 2`.
    Affine,
}

/// Mean over frames of `max(0, cos(frame, reference))`.
pub fn identity_score(emb: &EmbeddingSet) -> Result<f64> {
    identity_score_with(emb, CosinePolicy::ClampNegative)
}

pub fn identity_score_with(emb: &EmbeddingSet, policy: CosinePolicy) -> Result<f64> {
    if emb.frames.is_empty() {
        return Err(MetricsError::Input("no frames to score".into()));
    }
    let total: f64 = emb
        .frames
        .iter()
        .map(|f| {
            let c: f64 = f.iter().zip(&emb.reference).map(|(a, b)| a * b).sum();
            let c = c.clamp(-1.0, 1.0);
            match policy {
                CosinePolicy::ClampNegative => c.max(0.0),
                CosinePolicy::Affine => 0.5 * (1.0 + c),
            }
        })
        .sum();
    Ok((total / emb.frames.len() as f64).clamp(0.0, 1.0))
}
