use super::EmbeddingError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

/// Stable key for `(provider, model, text)`: hex SHA-256 over the three
/// fields separated by NUL bytes.
pub fn cache_key(provider_id: &str, model_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(provider_id.as_bytes());
    h.update([0u8]);
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

/// One line of the on-disk cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub provider: String,
    pub model: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

/// In-memory index with an optional append-only JSON-lines log behind it.
/// Reads are concurrent; appends are serialized and written as whole lines.
pub struct EmbeddingCache {
    index: RwLock<HashMap<String, Arc<[f64]>>>,
    log: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingCache")
            .field("path", &self.path)
            .field("entries", &self.len())
            .finish()
    }
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            index: RwLock::new(HashMap::new()),
            log: None,
            path: None,
        }
    }

    /// Opens (or creates) a cache file and loads its records. A truncated last
    /// line, as left by an interrupted append, is skipped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| cache_err(path, e))?;
        }
        let mut index = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| cache_err(path, e))?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| cache_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        index.insert(rec.key, Arc::from(rec.embedding));
                    }
                    Err(e) => log::warn!("{}: skipping cache line {}: {e}", path.display(), n + 1),
                }
            }
        }
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| cache_err(path, e))?;
        if !ends_with_newline(path).map_err(|e| cache_err(path, e))? {
            log.write_all(b"\n").map_err(|e| cache_err(path, e))?;
        }
        Ok(Self {
            index: RwLock::new(index),
            log: Some(Mutex::new(log)),
            path: Some(path.to_owned()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Arc<[f64]>> {
        self.index.read().expect("cache lock").get(key).cloned()
    }

    pub fn insert(
        &self,
        key: &str,
        provider: &str,
        model: &str,
        text: &str,
        values: Arc<[f64]>,
    ) -> Result<(), EmbeddingError> {
        if let Some(log) = &self.log {
            let record = CacheRecord {
                key: key.to_owned(),
                provider: provider.to_owned(),
                model: model.to_owned(),
                text: text.to_owned(),
                embedding: values.to_vec(),
            };
            let mut line = serde_json::to_string(&record)
                .map_err(|e| EmbeddingError::Cache(e.to_string()))?;
            line.push('\n');
            let mut file = log.lock().expect("cache log lock");
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| EmbeddingError::Cache(e.to_string()))?;
        }
        self.index
            .write()
            .expect("cache lock")
            .insert(key.to_owned(), values);
        Ok(())
    }
}

/// True for empty files and files whose last byte is `\n`.
fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    if f.metadata()?.len() == 0 {
        return Ok(true);
    }
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)?;
    Ok(last[0] == b'\n')
}

fn cache_err(path: &Path, e: std::io::Error) -> EmbeddingError {
    EmbeddingError::Cache(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_separates_fields() {
        assert_ne!(cache_key("ab", "c", "d"), cache_key("a", "bc", "d"));
        assert_eq!(cache_key("p", "m", "t"), cache_key("p", "m", "t"));
        assert_eq!(cache_key("p", "m", "t").len(), 64);
    }

    #[test]
    fn file_cache_persists_and_skips_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/cache.jsonl");
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache
                .insert("k1", "p", "m", "hello", Arc::from(vec![0.5, -0.25]))
                .unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"key\":\"k2\",\"prov").unwrap();
        drop(f);
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get("k1").unwrap().as_ref(), &[0.5, -0.25]);
        assert!(cache.get("k2").is_none());
        cache
            .insert("k3", "p", "m", "later", Arc::from(vec![1.0]))
            .unwrap();
        drop(cache);
        let reopened = EmbeddingCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.get("k3").unwrap().as_ref(), &[1.0]);
    }
}
