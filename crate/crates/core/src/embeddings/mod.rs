//! Text embeddings behind a uniform provider, plus the cosine-based
//! similarity and dissimilarity scores every method is built on.
//!
//! A [`Provider`] wraps an [`EmbeddingBackend`] (HTTP endpoint, cache file
//! replay, or an offline mock) and adds request deduplication, batching,
//! bounded concurrency and a content-addressed cache.

mod cache;
mod http;
pub mod mock;

pub use cache::{cache_key, CacheRecord, EmbeddingCache};
pub use http::HttpBackend;

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("request failed (retryable): {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("endpoint returned an invalid response: {0}")]
    InvalidResponse(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("text {index} is empty")]
    EmptyText { index: usize },
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("vector has dimension 0")]
    ZeroDimension,
    #[error("no cached embedding for {text:?}")]
    CacheMiss { text: String },
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error("embedding {text:?}: {source}")]
    ForText {
        text: String,
        #[source]
        source: Box<EmbeddingError>,
    },
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EmbeddingError::Transport(_) => true,
            EmbeddingError::ForText { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

/// A finite, non-empty embedding vector tagged with the provider and model
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Arc<[f64]>,
    provider_id: Arc<str>,
    model_id: Arc<str>,
}

impl Embedding {
    pub fn new(
        values: impl Into<Arc<[f64]>>,
        provider_id: impl Into<Arc<str>>,
        model_id: impl Into<Arc<str>>,
    ) -> Result<Self, EmbeddingError> {
        let values = values.into();
        check_vector(&values)?;
        Ok(Self {
            values,
            provider_id: provider_id.into(),
            model_id: model_id.into(),
        })
    }

    /// Untagged vector, mostly for tests and planted examples.
    pub fn from_values(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        Self::new(values, "local", "local")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }
}

fn check_vector(values: &[f64]) -> Result<(), EmbeddingError> {
    if values.is_empty() {
        return Err(EmbeddingError::ZeroDimension);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    Ok(())
}

/// Cosine similarity of two raw vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    cosine(a.values(), b.values())
}

/// `1 - cosine_similarity(a, b)`, in `[0, 2]`.
pub fn dissimilarity_score(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// A source of raw embedding vectors. Implementations return exactly one
/// vector per input text, in input order.
pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError>;

    /// Whether the empty string is a valid input.
    fn accepts_empty_input(&self) -> bool {
        false
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<B> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        (**self).embed(texts)
    }

    fn accepts_empty_input(&self) -> bool {
        (**self).accepts_empty_input()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// OpenAI-compatible `/embeddings` endpoint.
    Http,
    /// Replays a cache file; any miss is an error.
    CachedFile,
    /// Seeded hash of the whole text to a unit vector.
    DeterministicMock,
    /// Normalized sum of per-token hash vectors.
    BagOfWordsMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_id: String,
    /// Identifier used in cache keys; defaults to the endpoint or the mock name.
    pub provider_id: Option<String>,
    pub max_batch_size: usize,
    pub max_in_flight: usize,
    pub timeout_secs: f64,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub cache_path: Option<PathBuf>,
    pub cache_enabled: bool,
    pub mock_dimension: usize,
    pub mock_seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::DeterministicMock,
            endpoint: None,
            model_id: "mock".into(),
            provider_id: None,
            max_batch_size: 64,
            max_in_flight: 4,
            timeout_secs: 60.0,
            api_key_env: Some("DSD_EMBEDDING_API_KEY".into()),
            cache_path: None,
            cache_enabled: true,
            mock_dimension: mock::MOCK_DIMENSION,
            mock_seed: 0,
        }
    }
}

impl ProviderConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn bag_of_words_mock() -> Self {
        Self {
            kind: ProviderKind::BagOfWordsMock,
            model_id: "bow-mock".into(),
            ..Self::default()
        }
    }

    pub fn http(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::Http,
            endpoint: Some(endpoint.into()),
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.max_batch_size == 0 {
            return Err(EmbeddingError::Config("max_batch_size must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(EmbeddingError::Config("max_in_flight must be >= 1".into()));
        }
        if self.kind == ProviderKind::Http && self.endpoint.is_none() {
            return Err(EmbeddingError::Config("http provider needs an endpoint".into()));
        }
        if self.kind == ProviderKind::CachedFile && self.cache_path.is_none() {
            return Err(EmbeddingError::Config("cached-file provider needs a cache path".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(EmbeddingError::Config("timeout must be positive".into()));
        }
        Ok(())
    }

    fn resolved_provider_id(&self) -> String {
        if let Some(id) = &self.provider_id {
            return id.clone();
        }
        match self.kind {
            ProviderKind::Http | ProviderKind::CachedFile => {
                self.endpoint.clone().unwrap_or_else(|| "http".into())
            }
            ProviderKind::DeterministicMock => format!("mock-hash-{}", self.mock_seed),
            ProviderKind::BagOfWordsMock => format!("mock-bow-{}", self.mock_seed),
        }
    }
}

/// Backend used for [`ProviderKind::CachedFile`]: everything must come from the cache.
struct CacheOnly;

impl EmbeddingBackend for CacheOnly {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Err(EmbeddingError::CacheMiss {
            text: texts.first().cloned().unwrap_or_default(),
        })
    }
}

/// Deduplicating, caching, batching front end over an [`EmbeddingBackend`].
pub struct Provider {
    provider_id: Arc<str>,
    model_id: Arc<str>,
    backend: Box<dyn EmbeddingBackend>,
    cache: Option<EmbeddingCache>,
    max_batch_size: usize,
    max_in_flight: usize,
    dimension: OnceLock<usize>,
    requests: AtomicUsize,
    texts_sent: AtomicUsize,
}

impl std::fmt::Debug for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Provider")
            .field("provider_id", &self.provider_id)
            .field("model_id", &self.model_id)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Provider {
    /// Provider with an in-memory cache, batch size 64 and 4 requests in flight.
    pub fn new(
        provider_id: impl Into<Arc<str>>,
        model_id: impl Into<Arc<str>>,
        backend: impl EmbeddingBackend + 'static,
    ) -> Self {
        Self {
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            backend: Box::new(backend),
            cache: Some(EmbeddingCache::in_memory()),
            max_batch_size: 64,
            max_in_flight: 4,
            dimension: OnceLock::new(),
            requests: AtomicUsize::new(0),
            texts_sent: AtomicUsize::new(0),
        }
    }

    /// Hash mock, dimension 16.
    pub fn mock() -> Self {
        Self::new("mock-hash-0", "mock", mock::HashEmbedder::default())
    }

    /// Bag-of-words mock, dimension 16.
    pub fn bag_of_words_mock() -> Self {
        Self::new("mock-bow-0", "bow-mock", mock::BagOfWordsEmbedder::default())
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, EmbeddingError> {
        cfg.validate()?;
        let backend: Box<dyn EmbeddingBackend> = match cfg.kind {
            ProviderKind::Http => {
                let api_key = cfg
                    .api_key_env
                    .as_ref()
                    .and_then(|name| std::env::var(name).ok());
                Box::new(HttpBackend::new(
                    cfg.endpoint.clone().unwrap_or_default(),
                    cfg.model_id.clone(),
                    api_key,
                    Duration::from_secs_f64(cfg.timeout_secs),
                )?)
            }
            ProviderKind::CachedFile => Box::new(CacheOnly),
            ProviderKind::DeterministicMock => Box::new(mock::HashEmbedder::new(
                cfg.mock_dimension,
                cfg.mock_seed,
            )),
            ProviderKind::BagOfWordsMock => Box::new(mock::BagOfWordsEmbedder::new(
                cfg.mock_dimension,
                cfg.mock_seed,
            )),
        };
        let cache = match (&cfg.cache_path, cfg.cache_enabled || cfg.kind == ProviderKind::CachedFile) {
            (_, false) => None,
            (Some(path), true) => Some(EmbeddingCache::open(path)?),
            (None, true) => Some(EmbeddingCache::in_memory()),
        };
        Ok(Self {
            provider_id: cfg.resolved_provider_id().into(),
            model_id: cfg.model_id.as_str().into(),
            backend,
            cache,
            max_batch_size: cfg.max_batch_size,
            max_in_flight: cfg.max_in_flight,
            dimension: OnceLock::new(),
            requests: AtomicUsize::new(0),
            texts_sent: AtomicUsize::new(0),
        })
    }

    pub fn with_cache(mut self, cache: Option<EmbeddingCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_max_batch_size(mut self, n: usize) -> Self {
        self.max_batch_size = n.max(1);
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Number of backend requests issued so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    /// Number of texts sent to the backend so far.
    pub fn texts_sent(&self) -> usize {
        self.texts_sent.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    /// Embeds texts, one vector per input in input order. Empty (after
    /// trimming) texts are rejected.
    pub fn embed_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Embedding>, EmbeddingError> {
        if let Some(index) = texts.iter().position(|t| t.as_ref().trim().is_empty()) {
            return Err(EmbeddingError::EmptyText { index });
        }
        let owned: Vec<String> = texts.iter().map(|t| t.as_ref().to_owned()).collect();
        self.fetch(&owned)
    }

    pub fn embed_one(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    /// Like [`embed_batch`](Self::embed_batch) but empty texts are allowed:
    /// they are sent as `""` when the backend accepts it and as a single space
    /// otherwise. Used for perturbations that can delete every token.
    pub fn embed_perturbations<S: AsRef<str>>(
        &self,
        texts: &[S],
    ) -> Result<Vec<Embedding>, EmbeddingError> {
        let empty = if self.backend.accepts_empty_input() { "" } else { " " };
        let owned: Vec<String> = texts
            .iter()
            .map(|t| {
                let t = t.as_ref();
                if t.trim().is_empty() {
                    empty.to_owned()
                } else {
                    t.to_owned()
                }
            })
            .collect();
        self.fetch(&owned)
    }

    pub fn similarity(&self, a: &str, b: &str) -> Result<f64, EmbeddingError> {
        let v = self.embed_batch(&[a, b])?;
        cosine_similarity(&v[0], &v[1])
    }

    fn fetch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbeddingError> {
        let mut unique: Vec<&str> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            slot.entry(t.as_str()).or_insert_with(|| {
                unique.push(t.as_str());
                unique.len() - 1
            });
        }

        let keys: Vec<String> = unique
            .iter()
            .map(|t| cache_key(&self.provider_id, &self.model_id, t))
            .collect();
        let mut found: Vec<Option<Arc<[f64]>>> = match &self.cache {
            Some(cache) => keys.iter().map(|k| cache.get(k)).collect(),
            None => vec![None; unique.len()],
        };

        let misses: Vec<usize> = (0..unique.len()).filter(|&i| found[i].is_none()).collect();
        if !misses.is_empty() {
            let fetched = self.dispatch(&misses.iter().map(|&i| unique[i].to_owned()).collect::<Vec<_>>())?;
            for (&i, vector) in misses.iter().zip(fetched) {
                let vector: Arc<[f64]> = vector.into();
                if let Some(cache) = &self.cache {
                    cache.insert(
                        &keys[i],
                        &self.provider_id,
                        &self.model_id,
                        unique[i],
                        vector.clone(),
                    )?;
                }
                found[i] = Some(vector);
            }
        }

        texts
            .iter()
            .map(|t| {
                let values = found[slot[t.as_str()]].clone().expect("filled above");
                Ok(Embedding {
                    values,
                    provider_id: self.provider_id.clone(),
                    model_id: self.model_id.clone(),
                })
            })
            .collect()
    }

    /// Sends `texts` in batches, at most `max_in_flight` at a time.
    fn dispatch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let batches: Vec<&[String]> = texts.chunks(self.max_batch_size).collect();
        let mut results: Vec<Option<Result<Vec<Vec<f64>>, EmbeddingError>>> =
            (0..batches.len()).map(|_| None).collect();
        for wave in (0..batches.len()).collect::<Vec<_>>().chunks(self.max_in_flight) {
            if wave.len() == 1 {
                results[wave[0]] = Some(self.request(batches[wave[0]]));
                continue;
            }
            let outputs: Vec<_> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&b| {
                        let batch = batches[b];
                        scope.spawn(move || self.request(batch))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            });
            for (&b, out) in wave.iter().zip(outputs) {
                results[b] = Some(out);
            }
        }
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r.expect("every batch dispatched")?);
        }
        Ok(out)
    }

    fn request(&self, batch: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.texts_sent.fetch_add(batch.len(), Ordering::Relaxed);
        let vectors = self.backend.embed(batch).map_err(|e| match (&e, batch) {
            (EmbeddingError::CacheMiss { .. }, _) => e,
            (_, [single]) => EmbeddingError::ForText {
                text: single.clone(),
                source: Box::new(e),
            },
            _ => e,
        })?;
        if vectors.len() != batch.len() {
            return Err(EmbeddingError::InvalidResponse(format!(
                "{} vectors for {} texts",
                vectors.len(),
                batch.len()
            )));
        }
        for (v, text) in vectors.iter().zip(batch) {
            check_vector(v).map_err(|e| EmbeddingError::ForText {
                text: text.clone(),
                source: Box::new(e),
            })?;
            let expected = *self.dimension.get_or_init(|| v.len());
            if v.len() != expected {
                return Err(EmbeddingError::DimensionMismatch {
                    expected,
                    actual: v.len(),
                });
            }
        }
        Ok(vectors)
    }
}
