//! Content-addressed record/replay cache: one JSON file per request key.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CompletionRequest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_id: String,
    pub temperature: f64,
    pub prompt_text: String,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct ReplayCache {
    dir: PathBuf,
}

/// SHA-256 over the canonical JSON of `(model_id, temperature, prompt_text)`.
pub fn request_key(req: &CompletionRequest) -> String {
    let canonical = serde_json::json!([req.model_id, req.temperature, req.prompt_text]);
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)
}

impl ReplayCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> std::io::Result<Option<CacheEntry>> {
        match fs::read_to_string(self.path_for(key)) {
            Ok(raw) => serde_json::from_str(&raw)
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Writes through a temporary file and renames, so concurrent readers
    /// never observe a partial entry.
    pub fn put(&self, entry: &CacheEntry) -> std::io::Result<()> {
        let final_path = self.path_for(&entry.key);
        let tmp = self
            .dir
            .join(format!(".{}.{}.tmp", entry.key, std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            let body = serde_json::to_string_pretty(entry)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            f.write_all(body.as_bytes())?;
            f.write_all(b"\n")?;
        }
        fs::rename(tmp, final_path)
    }

    pub fn len(&self) -> std::io::Result<usize> {
        Ok(fs::read_dir(&self.dir)?
            .filter_map(Result::ok)
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count())
    }

    pub fn is_empty(&self) -> std::io::Result<bool> {
        self.len().map(|n| n == 0)
    }
}
