//! Append-only on-disk cache for completions and embeddings. Replayed runs
//! hit the cache instead of the provider, which is what makes interrupted
//! inductions resumable and mock runs reproducible.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CompletionRow {
    key: String,
    response: String,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRow {
    key: String,
    vector: Vec<f32>,
}

struct Inner {
    completions: HashMap<String, String>,
    embeddings: HashMap<String, Vec<f32>>,
    completion_file: File,
    embedding_file: File,
}

pub struct CompletionCache {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn load_rows<T: serde::de::DeserializeOwned>(path: &Path, mut take: impl FnMut(T)) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line).map_err(|e| {
            Error::Cache(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        take(row);
    }
    Ok(())
}

impl CompletionCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cpath = dir.join("completions.jsonl");
        let epath = dir.join("embeddings.jsonl");
        let mut completions = HashMap::new();
        let mut embeddings = HashMap::new();
        load_rows(&cpath, |r: CompletionRow| {
            completions.insert(r.key, r.response);
        })?;
        load_rows(&epath, |r: EmbeddingRow| {
            embeddings.insert(r.key, r.vector);
        })?;
        Ok(CompletionCache {
            dir: dir.to_path_buf(),
            inner: Mutex::new(Inner {
                completions,
                embeddings,
                completion_file: open_append(&cpath)?,
                embedding_file: open_append(&epath)?,
            }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn completion(&self, key: &str) -> Option<String> {
        self.inner
            .lock()
            .expect("cache lock poisoned")
            .completions
            .get(key)
            .cloned()
    }

    pub fn store_completion(&self, key: &str, response: &str) -> Result<()> {
        let mut inner = self.inner.lock().expect("cache lock poisoned");
        if inner.completions.contains_key(key) {
            return Ok(());
        }
        let row = serde_json::to_string(&CompletionRow {
            key: key.to_string(),
            response: response.to_string(),
        })
        .expect("cache row serializes");
        writeln!(inner.completion_file, "{row}")
            .map_err(|e| Error::io(self.dir.join("completions.jsonl"), e))?;
        inner.completions.insert(key.to_string(), response.to_string());
        Ok(())
    }

    pub fn embedding(&self, key: &str) -> Option<Vec<f32>> {
        self.inner
            .lock()
            .expect("cache lock poisoned")
            .embeddings
            .get(key)
            .cloned()
    }

    pub fn store_embedding(&self, key: &str, vector: &[f32]) -> Result<()> {
        let mut inner = self.inner.lock().expect("cache lock poisoned");
        if inner.embeddings.contains_key(key) {
            return Ok(());
        }
        let row = serde_json::to_string(&EmbeddingRow {
            key: key.to_string(),
            vector: vector.to_vec(),
        })
        .expect("cache row serializes");
        writeln!(inner.embedding_file, "{row}")
            .map_err(|e| Error::io(self.dir.join("embeddings.jsonl"), e))?;
        inner.embeddings.insert(key.to_string(), vector.to_vec());
        Ok(())
    }

    pub fn len(&self) -> (usize, usize) {
        let inner = self.inner.lock().expect("cache lock poisoned");
        (inner.completions.len(), inner.embeddings.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = CompletionCache::open(dir.path()).unwrap();
            cache.store_completion("k1", "hello").unwrap();
            cache.store_embedding("e1", &[0.5, -0.5]).unwrap();
            assert_eq!(cache.completion("k1").as_deref(), Some("hello"));
        }
        let cache = CompletionCache::open(dir.path()).unwrap();
        assert_eq!(cache.completion("k1").as_deref(), Some("hello"));
        assert_eq!(cache.embedding("e1"), Some(vec![0.5, -0.5]));
        assert_eq!(cache.len(), (1, 1));
    }

    #[test]
    fn duplicate_store_writes_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CompletionCache::open(dir.path()).unwrap();
        cache.store_completion("k", "v").unwrap();
        cache.store_completion("k", "v").unwrap();
        drop(cache);
        let text = std::fs::read_to_string(dir.path().join("completions.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn corrupt_row_is_a_cache_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("completions.jsonl"), "not json\n").unwrap();
        match CompletionCache::open(dir.path()) {
            Err(Error::Cache(msg)) => assert!(msg.contains(":1:")),
            Err(other) => panic!("expected cache error, got {other:?}"),
            Ok(_) => panic!("corrupt cache opened cleanly"),
        }
    }

    #[test]
    fn multiline_responses_survive_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let response = "line one\nline two\n```json\n{\"a\": 1}\n```";
        {
            let cache = CompletionCache::open(dir.path()).unwrap();
            cache.store_completion("k", response).unwrap();
        }
        let cache = CompletionCache::open(dir.path()).unwrap();
        assert_eq!(cache.completion("k").as_deref(), Some(response));
    }
}
