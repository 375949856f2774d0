use super::{EmbeddingBackend, EmbeddingError};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use std::time::Duration;

const MAX_ATTEMPTS: u32 = 3;

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// OpenAI-compatible embeddings client: `POST {"model", "input"}` and read
/// `data[*].embedding`, reordered by `data[*].index`.
pub struct HttpBackend {
    client: Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry_delay: Duration,
}

impl HttpBackend {
    pub fn new(
        endpoint: String,
        model: String,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, EmbeddingError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbeddingError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint,
            model,
            api_key,
            retry_delay: Duration::from_millis(250),
        })
    }

    pub fn with_retry_delay(mut self, delay: Duration) -> Self {
        self.retry_delay = delay;
        self
    }

    fn attempt(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut req = self.client.post(&self.endpoint).json(&EmbeddingRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(EmbeddingError::Auth(format!("{status}")));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(EmbeddingError::Transport(format!("{status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(EmbeddingError::InvalidResponse(format!("{status}: {body}")));
        }
        let parsed: EmbeddingResponse = resp
            .json()
            .map_err(|e| EmbeddingError::InvalidResponse(e.to_string()))?;
        reorder(parsed.data, texts.len())
    }
}

fn reorder(data: Vec<EmbeddingDatum>, expected: usize) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    if data.len() != expected {
        return Err(EmbeddingError::InvalidResponse(format!(
            "{} embeddings for {expected} inputs",
            data.len()
        )));
    }
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; expected];
    for d in data {
        let slot = slots.get_mut(d.index).ok_or_else(|| {
            EmbeddingError::InvalidResponse(format!("index {} out of range", d.index))
        })?;
        if slot.replace(d.embedding).is_some() {
            return Err(EmbeddingError::InvalidResponse(format!(
                "duplicate index {}",
                d.index
            )));
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all indices filled")).collect())
}

impl EmbeddingBackend for HttpBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut attempt = 0;
        loop {
            match self.attempt(texts) {
                Err(e) if e.is_retryable() && attempt + 1 < MAX_ATTEMPTS => {
                    log::warn!("embedding request failed, retrying: {e}");
                    std::thread::sleep(self.retry_delay * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}
