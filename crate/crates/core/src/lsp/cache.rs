use std::path::{Path, PathBuf};

use log::warn;
use sha2::{Digest, Sha256};

use super::{DecompositionResult, PROMPT_VERSION};
use crate::error::{Error, Result};

/// One JSON file per entry, named by SHA-256 of the prompt version and text.
#[derive(Debug, Clone)]
pub struct DecompositionCache {
    dir: PathBuf,
}

impl DecompositionCache {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        Self {
            dir: dir.as_ref().to_path_buf(),
        }
    }

    pub fn key(text: &str) -> String {
        let mut h = Sha256::new();
        h.update(PROMPT_VERSION.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, text: &str) -> PathBuf {
        self.dir.join(format!("{}.json", Self::key(text)))
    }

    /// `None` on a miss or an unreadable entry.
    pub fn get(&self, text: &str) -> Option<DecompositionResult> {
        let path = self.path(text);
        let raw = std::fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<DecompositionResult>(&raw) {
            Ok(r) if r.k == r.sub_actions.len() && r.k > 0 => Some(r),
            Ok(_) => {
                warn!("ignoring inconsistent cache entry {}", path.display());
                None
            }
            Err(e) => {
                warn!("ignoring corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    /// Writes through a temporary file so readers never see partial entries.
    pub fn put(&self, text: &str, result: &DecompositionResult) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(text);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_string_pretty(result)?;
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::super::DecompositionSource;
    use super::*;
    use std::collections::BTreeMap;

    fn sample() -> DecompositionResult {
        DecompositionResult {
            sub_actions: vec!["sit".into(), "wave".into()],
            k: 2,
            votes: BTreeMap::from([("sit|wave".to_string(), 3)]),
            source: DecompositionSource::LlmVoted,
        }
    }

    #[test]
    fn round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let c = DecompositionCache::new(dir.path());
        assert!(c.get("t").is_none());
        c.put("t", &sample()).unwrap();
        assert_eq!(c.get("t").unwrap(), sample());
        assert!(c.get("other").is_none());
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let c = DecompositionCache::new(dir.path());
        std::fs::write(c.path("t"), "{not json").unwrap();
        assert!(c.get("t").is_none());
        c.put("t", &sample()).unwrap();
        assert!(c.get("t").is_some());
    }

    #[test]
    fn key_depends_on_text() {
        assert_ne!(DecompositionCache::key("a"), DecompositionCache::key("b"));
        assert_eq!(DecompositionCache::key("a").len(), 64);
    }
}
