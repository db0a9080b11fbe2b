//! Persistent response cache.
//!
//! The on-disk format is an append-only log of length-prefixed JSON records:
//! a little-endian u32 byte length followed by that many JSON bytes. The
//! first record is the header `{"version":"vpcache/1"}`. Records are flushed
//! before a response is returned, so a killed run never loses paid queries.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

pub const CACHE_VERSION: &str = "vpcache/1";

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache log corrupt at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("cache log version {found:?}, expected {CACHE_VERSION:?}")]
    Version { found: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
}

/// One cached exchange. The audit fields (model, prompt, question) make the
/// log greppable; only `key` is used for lookups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub model_ref: String,
    pub image_digest: String,
    pub prompt_id: String,
    pub text: String,
    pub greedy: bool,
    pub max_tokens: u32,
    pub response_text: String,
    pub latency_ms: f64,
    pub token_count: u32,
}

#[derive(Debug, Clone)]
pub struct CachedEntry {
    pub response_text: String,
    pub latency_ms: f64,
    pub token_count: u32,
}

/// Thread-safe cache with an optional disk log. Lookups take a read lock;
/// appends serialize through the writer mutex and flush before indexing.
#[derive(Debug)]
pub struct ResponseCache {
    index: RwLock<HashMap<[u8; 32], CachedEntry>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl ResponseCache {
    /// Memory-only cache (no persistence).
    pub fn in_memory() -> Self {
        ResponseCache { index: RwLock::new(HashMap::new()), writer: Mutex::new(None) }
    }

    /// Opens or creates a log file, replaying existing records into the index.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut index = HashMap::new();
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        if exists {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            let mut offset = 0u64;
            let mut first = true;
            while (offset as usize) < bytes.len() {
                let rest = &bytes[offset as usize..];
                if rest.len() < 4 {
                    return Err(CacheError::Corrupt { offset, reason: "truncated length prefix".into() });
                }
                let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
                if rest.len() < 4 + len {
                    return Err(CacheError::Corrupt { offset, reason: format!("record of {len} bytes truncated") });
                }
                let payload = &rest[4..4 + len];
                if first {
                    let header: Header = serde_json::from_slice(payload)
                        .map_err(|e| CacheError::Corrupt { offset, reason: e.to_string() })?;
                    if header.version != CACHE_VERSION {
                        return Err(CacheError::Version { found: header.version });
                    }
                    first = false;
                } else {
                    let rec: CacheRecord = serde_json::from_slice(payload)
                        .map_err(|e| CacheError::Corrupt { offset, reason: e.to_string() })?;
                    let key: [u8; 32] = hex::decode(&rec.key)
                        .ok()
                        .and_then(|v| v.try_into().ok())
                        .ok_or_else(|| CacheError::Corrupt { offset, reason: "bad key hex".into() })?;
                    index.insert(
                        key,
                        CachedEntry {
                            response_text: rec.response_text,
                            latency_ms: rec.latency_ms,
                            token_count: rec.token_count,
                        },
                    );
                }
                offset += 4 + len as u64;
            }
            if first {
                return Err(CacheError::Corrupt { offset: 0, reason: "missing header record".into() });
            }
        }

        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = BufWriter::new(file);
        if !exists {
            let header = serde_json::to_vec(&Header { version: CACHE_VERSION.into() }).expect("header serializes");
            writer.write_all(&(header.len() as u32).to_le_bytes())?;
            writer.write_all(&header)?;
            writer.flush()?;
        }
        Ok(ResponseCache { index: RwLock::new(index), writer: Mutex::new(Some(writer)) })
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<CachedEntry> {
        self.index.read().unwrap().get(key).cloned()
    }

    /// Appends the record to the log (flushing it) and indexes it.
    pub fn put(&self, key: [u8; 32], record: CacheRecord) -> Result<(), CacheError> {
        {
            let mut writer = self.writer.lock().unwrap();
            if let Some(w) = writer.as_mut() {
                let payload = serde_json::to_vec(&record).expect("record serializes");
                w.write_all(&(payload.len() as u32).to_le_bytes())?;
                w.write_all(&payload)?;
                w.flush()?;
            }
        }
        self.index.write().unwrap().insert(
            key,
            CachedEntry {
                response_text: record.response_text,
                latency_ms: record.latency_ms,
                token_count: record.token_count,
            },
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(key: [u8; 32], text: &str) -> CacheRecord {
        CacheRecord {
            key: hex::encode(key),
            model_ref: "mock:test".into(),
            image_digest: "00".repeat(32),
            prompt_id: "none".into(),
            text: "Is there a dog in the image?".into(),
            greedy: true,
            max_tokens: 512,
            response_text: text.into(),
            latency_ms: 1.5,
            token_count: 1,
        }
    }

    #[test]
    fn reopen_replays_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.log");
        let key = [7u8; 32];
        {
            let cache = ResponseCache::open(&path).unwrap();
            assert!(cache.get(&key).is_none());
            cache.put(key, record(key, "Yes")).unwrap();
            assert_eq!(cache.get(&key).unwrap().response_text, "Yes");
        }
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get(&key).unwrap().response_text, "Yes");
        assert_eq!(cache.get(&key).unwrap().token_count, 1);
    }

    #[test]
    fn truncated_log_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.log");
        let key = [9u8; 32];
        {
            let cache = ResponseCache::open(&path).unwrap();
            cache.put(key, record(key, "No")).unwrap();
        }
        let full = std::fs::metadata(&path).unwrap().len();
        let file = OpenOptions::new().write(true).open(&path).unwrap();
        file.set_len(full - 3).unwrap();
        match ResponseCache::open(&path) {
            Err(CacheError::Corrupt { offset, .. }) => assert!(offset > 0),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.log");
        let header = br#"{"version":"vpcache/9"}"#;
        let mut bytes = (header.len() as u32).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(ResponseCache::open(&path), Err(CacheError::Version { .. })));
    }

    #[test]
    fn last_write_wins_on_duplicate_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.log");
        let key = [1u8; 32];
        {
            let cache = ResponseCache::open(&path).unwrap();
            cache.put(key, record(key, "first")).unwrap();
            cache.put(key, record(key, "second")).unwrap();
        }
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.get(&key).unwrap().response_text, "second");
    }
}
