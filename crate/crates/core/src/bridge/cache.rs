//! On-disk cache of backend results keyed by a hash of the request.
//!
//! Keys cover the backend identity string and the request body, not the
//! model weights: a cache directory must not be shared across model versions.

use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::wire::Request;

pub const CACHE_ENV: &str = "CLOZE_FORGE_CACHE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseCache {
    dir: PathBuf,
    identity: String,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>, identity: &str) -> Self {
        Self { dir: dir.into(), identity: identity.into() }
    }

    /// Cache rooted at `$CLOZE_FORGE_CACHE`, if the variable is set and non-empty.
    pub fn from_env(identity: &str) -> Option<Self> {
        std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(|d| Self::new(PathBuf::from(d), identity))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(&self, request: &Request) -> String {
        let mut h = Sha256::new();
        h.update(self.identity.as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_vec(request).expect("requests serialize"));
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// A cached result; unreadable or corrupt entries count as misses.
    pub fn get(&self, request: &Request) -> Option<Value> {
        let bytes = std::fs::read(self.path(&self.key(request))).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// Stores a result. Write failures are ignored: the cache is best effort.
    pub fn put(&self, request: &Request, result: &Value) {
        let path = self.path(&self.key(request));
        let Some(parent) = path.parent() else { return };
        if std::fs::create_dir_all(parent).is_err() {
            return;
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        if std::fs::write(&tmp, result.to_string()).is_ok() {
            let _ = std::fs::rename(&tmp, &path);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stores_and_separates_backends() {
        let dir = tempfile::tempdir().unwrap();
        let a = ResponseCache::new(dir.path(), "cmd:model-a");
        let b = ResponseCache::new(dir.path(), "cmd:model-b");
        let req = Request::Tokenize { text: "New York".into() };
        assert!(a.get(&req).is_none());
        a.put(&req, &serde_json::json!({"ids": [1, 2]}));
        assert_eq!(a.get(&req).unwrap()["ids"][0], 1);
        assert!(b.get(&req).is_none());
        assert_ne!(a.key(&req), a.key(&Request::Tokenize { text: "New york".into() }));
        assert_eq!(a.key(&req).len(), 64);
    }
}
