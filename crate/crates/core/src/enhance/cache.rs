//! Content-addressed response cache.
//!
//! Entries live at `<dir>/<k[..2]>/<k>.json` where `k` is the SHA-256 of the
//! request inputs. Reads are lock-free; writes go through a mutex and an
//! atomic rename so a reader never sees a partial file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EnhanceError;
use crate::artifact::write_atomic;

pub const CACHE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_digest: String,
    pub output_digest: String,
    pub ref_prompt: String,
    pub provider: String,
    pub generated_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub schema_version: u32,
    pub provider_name: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Digest of a list of fields; the separator keeps ("ab","c") and ("a","bc") apart.
pub fn cache_key(namespace: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(namespace.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EnhanceError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("blobs")).map_err(|e| EnhanceError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, write_lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.entry_path(key)).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(e) if e.schema_version == CACHE_SCHEMA_VERSION => Some(e),
            _ => {
                log::warn!("ignoring unreadable cache entry {key}");
                None
            }
        }
    }

    pub fn put(&self, key: &str, entry: &CacheEntry) -> Result<(), EnhanceError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut bytes = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        bytes.push(b'\n');
        write_atomic(&self.entry_path(key), &bytes).map_err(|e| EnhanceError::Io(e.to_string()))
    }

    pub fn blob_path(&self, digest: &str) -> PathBuf {
        self.dir.join("blobs").join(digest)
    }

    /// Stores file contents under their own digest and returns it.
    pub fn put_blob(&self, src: &Path) -> Result<String, EnhanceError> {
        let bytes = fs::read(src).map_err(|e| EnhanceError::Io(format!("{}: {e}", src.display())))?;
        let digest = sha256_hex(&bytes);
        let dest = self.blob_path(&digest);
        if !dest.exists() {
            let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
            write_atomic(&dest, &bytes).map_err(|e| EnhanceError::Io(e.to_string()))?;
        }
        Ok(digest)
    }
}
