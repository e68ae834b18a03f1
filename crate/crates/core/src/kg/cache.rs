use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// What was asked; stored alongside the verbatim response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedRequest {
    pub operation: String,
    pub query: String,
    pub language: String,
    pub limit: usize,
}

impl CachedRequest {
    /// SHA-256 hex of operation, normalized query, language and limit.
    pub fn key(&self) -> String {
        let mut h = Sha256::new();
        for part in [self.operation.as_str(), self.query.as_str(), self.language.as_str(), &self.limit.to_string()] {
            h.update(part.as_bytes());
            h.update([0x1f]);
        }
        hex::encode(h.finalize())
    }
}

/// One cache file. `response_body_verbatim` holds every page body exactly
/// as received, in request order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: CachedRequest,
    pub response_body_verbatim: Vec<String>,
    pub fetched_at: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, request: &CachedRequest) -> PathBuf {
        self.dir.join(format!("{}.json", request.key()))
    }

    pub fn get(&self, request: &CachedRequest) -> Result<Option<CacheEntry>> {
        let path = self.path_for(request);
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let entry: CacheEntry =
                    serde_json::from_str(&text).map_err(|e| Error::MalformedResponse(format!("cache file {}: {e}", path.display())))?;
                Ok(Some(entry))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(format!("reading {}", path.display()), e)),
        }
    }

    /// Writes via temp file and rename. An existing file with the same
    /// request and body is left untouched, `fetched_at` included.
    pub fn put(&self, entry: &CacheEntry) -> Result<bool> {
        if let Some(existing) = self.get(&entry.request).ok().flatten() {
            if existing.request == entry.request && existing.response_body_verbatim == entry.response_body_verbatim {
                return Ok(false);
            }
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(format!("creating {}", self.dir.display()), e))?;
        let path = self.path_for(&entry.request);
        let tmp =
            self.dir.join(format!(".{}.{}.{}.tmp", entry.request.key(), std::process::id(), TMP_COUNTER.fetch_add(1, Ordering::Relaxed)));
        let mut text = serde_json::to_string_pretty(entry)?;
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(format!("renaming into {}", path.display()), e))?;
        Ok(true)
    }
}
