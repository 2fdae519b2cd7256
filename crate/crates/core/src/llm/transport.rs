//! Transport abstraction and the record/replay fixture store.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LlmError, Result};

/// Anything that can answer a (system, user) prompt pair.
pub trait LlmTransport: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String>;
}

/// The exact text hashed for fixture lookup.
fn joined(system: &str, user: &str) -> String {
    format!("{}\n{}", system.trim_end(), user)
}

/// Hex SHA-256 of the full prompt.
pub fn prompt_hash(system: &str, user: &str) -> String {
    hex::encode(Sha256::digest(joined(system, user).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub prompt: String,
    pub response: String,
}

/// Directory of `<hash>.json` files; access is serialized through a lock.
#[derive(Debug)]
pub struct FixtureStore {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore {
            dir: dir.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get(&self, system: &str, user: &str) -> Result<Option<String>> {
        let hash = prompt_hash(system, user);
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.path(&hash);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| LlmError::Store(format!("{}: {e}", path.display())))?;
        let rec: FixtureRecord =
            serde_json::from_str(&text).map_err(|e| LlmError::Store(format!("{}: {e}", path.display())))?;
        if rec.prompt != joined(system, user) {
            return Ok(None);
        }
        Ok(Some(rec.response))
    }

    pub fn put(&self, system: &str, user: &str, response: &str) -> Result<String> {
        let hash = prompt_hash(system, user);
        let rec = FixtureRecord {
            prompt: joined(system, user),
            response: response.to_string(),
        };
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        fs::create_dir_all(&self.dir).map_err(|e| LlmError::Store(e.to_string()))?;
        let mut text = serde_json::to_string_pretty(&rec).expect("record serializes");
        text.push('\n');
        fs::write(self.path(&hash), text).map_err(|e| LlmError::Store(e.to_string()))?;
        Ok(hash)
    }
}

/// Serves responses from the store only; never touches the inner transport.
pub struct ReplayTransport<'a> {
    store: &'a FixtureStore,
}

impl<'a> ReplayTransport<'a> {
    pub fn new(store: &'a FixtureStore) -> Self {
        ReplayTransport { store }
    }
}

impl LlmTransport for ReplayTransport<'_> {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        self.store.get(system, user)?.ok_or_else(|| LlmError::FixtureMiss {
            hash: prompt_hash(system, user),
        })
    }
}

/// Forwards to a live transport and persists every response.
pub struct RecordingTransport<'a, T: LlmTransport> {
    inner: T,
    store: &'a FixtureStore,
}

impl<'a, T: LlmTransport> RecordingTransport<'a, T> {
    pub fn new(inner: T, store: &'a FixtureStore) -> Self {
        RecordingTransport { inner, store }
    }
}

impl<T: LlmTransport> LlmTransport for RecordingTransport<'_, T> {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let response = self.inner.complete(system, user)?;
        self.store.put(system, user, &response)?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting(AtomicUsize);

    impl LlmTransport for Counting {
        fn complete(&self, _system: &str, user: &str) -> Result<String> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(format!("echo {}", user.len()))
        }
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::new(dir.path());
        let rec = RecordingTransport::new(Counting(AtomicUsize::new(0)), &store);
        let live = rec.complete("sys", "hello").unwrap();
        assert_eq!(rec.inner.0.load(Ordering::SeqCst), 1);
        let replay = ReplayTransport::new(&store);
        assert_eq!(replay.complete("sys", "hello").unwrap(), live);
        let miss = replay.complete("sys", "other").unwrap_err();
        assert_eq!(miss, LlmError::FixtureMiss { hash: prompt_hash("sys", "other") });
        assert!(dir.path().join(format!("{}.json", prompt_hash("sys", "hello"))).exists());
    }

    #[test]
    fn hash_is_sha256_of_joined_prompt() {
        assert_eq!(
            prompt_hash("", ""),
            // sha256 of a single newline
            "01ba4719c80b6fe911b091a7c05124b64eeece964e09c058ef8f9805daca546b"
        );
    }
}
