//! On-disk reply cache, `{root}/{first two hex chars}/{digest}.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::JudgeRequest;
use crate::canonical::{sha256_hex, to_canonical_json, write_atomic};
use crate::error::Result;
use crate::prompting::Stage;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestSummary {
    pub model_id: String,
    pub temperature: f64,
    pub stage: Stage,
    pub prompt_sha256: String,
    pub image_digest: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: RequestSummary,
    pub raw_text: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ResponseCache { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2.min(key.len())]).join(format!("{key}.json"))
    }

    /// Missing or unreadable entries are misses.
    pub fn get(&self, key: &str) -> Option<String> {
        let text = fs::read_to_string(self.path_for(key)).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) => Some(entry.raw_text),
            Err(e) => {
                log::warn!("corrupt cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn put(&self, key: &str, request: &JudgeRequest, raw_text: &str) -> Result<()> {
        let entry = CacheEntry {
            request: RequestSummary {
                model_id: request.model_id.clone(),
                temperature: request.temperature,
                stage: request.prompt.stage,
                prompt_sha256: sha256_hex(request.prompt.text.as_bytes()),
                image_digest: request.image_digest.clone(),
            },
            raw_text: raw_text.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        write_atomic(&self.path_for(key), to_canonical_json(&entry)?.as_bytes())
    }
}
