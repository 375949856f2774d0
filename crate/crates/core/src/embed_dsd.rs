//! Dissimilar span detection from n-gram replacement gains.
//!
//! Every k-gram of sentence 1 (k = 1, 2, ...) is pasted over every k-token
//! window of sentence 2. A replacement's gain is how much closer the edited
//! sentence 2 gets to sentence 1:
//!
//! ```text
//! gain = cos(s1, replaced s2) - cos(s1, s2)
//! ```
//!
//! Each gain is credited to every token it replaced. Per token, the gains of
//! one n-gram size are reduced to their maximum, and the resulting per-size
//! list `g_1, g_2, ..., g_n` (ascending size) is aggregated as
//!
//! ```text
//! agg = (1/n) * sum_i g_i / i
//! ```
//!
//! so that wide replacements weigh less than local ones. Tokens whose
//! aggregate exceeds the threshold are dissimilar, and contiguous dissimilar
//! tokens form one span.

use crate::corpus::Sentence;
use crate::embeddings::{cosine_similarity, EmbeddingError, Provider};
use crate::spans::{weights_to_spans, SpanAnnotation, TokenSpan};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DsdError {
    #[error("sentence {0} has no tokens")]
    EmptySentence(u8),
    #[error("cannot aggregate an empty gain list")]
    EmptyGains,
    #[error("threshold must not be NaN")]
    InvalidThreshold,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Sentence 2 with tokens `[start, start + len)` overwritten by the k-gram of
/// sentence 1 starting at `source_start`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replacement {
    pub start: usize,
    pub len: usize,
    pub source_start: usize,
    pub text: String,
}

impl Replacement {
    pub fn replaced(&self) -> TokenSpan {
        TokenSpan::new(self.start, self.start + self.len)
    }

    pub fn ngram_size(&self) -> usize {
        self.len
    }
}

/// All n-gram replacements of sentence 1 into sentence 2, ordered by n-gram
/// size, then source offset, then target position.
///
/// Sizes run from 1 up to `min(|s1|, |s2|)`, further capped by `max_ngram`.
pub fn generate_replacements<S: AsRef<str>>(
    s1: &[S],
    s2: &[S],
    max_ngram: Option<usize>,
) -> Result<Vec<Replacement>, DsdError> {
    if s1.is_empty() {
        return Err(DsdError::EmptySentence(1));
    }
    if s2.is_empty() {
        return Err(DsdError::EmptySentence(2));
    }
    let (n1, n2) = (s1.len(), s2.len());
    let top = n1.min(n2).min(max_ngram.unwrap_or(usize::MAX));
    let mut out = Vec::new();
    let mut buf: Vec<&str> = s2.iter().map(AsRef::as_ref).collect();
    for k in 1..=top {
        for src in 0..=n1 - k {
            for pos in 0..=n2 - k {
                for j in 0..k {
                    buf[pos + j] = s1[src + j].as_ref();
                }
                out.push(Replacement {
                    start: pos,
                    len: k,
                    source_start: src,
                    text: buf.join(" "),
                });
                for j in 0..k {
                    buf[pos + j] = s2[pos + j].as_ref();
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizedGain {
    pub ngram_size: usize,
    pub gain: f64,
}

/// Gains credited to each token of sentence 2 and their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMap {
    pub base_similarity: f64,
    /// Raw gains per token, in ascending n-gram size.
    pub per_token: Vec<Vec<SizedGain>>,
    pub aggregated: Vec<f64>,
}

impl GainMap {
    /// Marks tokens with aggregated gain above `threshold` and groups them.
    pub fn spans(&self, threshold: f64) -> Vec<SpanAnnotation> {
        weights_to_spans(&self.aggregated, threshold)
    }

    pub fn max_aggregated(&self) -> f64 {
        self.aggregated
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Reduces gains (already in ascending size order) to one maximum per size.
pub fn per_size_maxima(gains: &[SizedGain]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    let mut current: Option<usize> = None;
    for g in gains {
        if current == Some(g.ngram_size) {
            let last = out.last_mut().expect("size seen");
            *last = last.max(g.gain);
        } else {
            debug_assert!(current.is_none_or(|c| c < g.ngram_size));
            current = Some(g.ngram_size);
            out.push(g.gain);
        }
    }
    out
}

/// `(1/n) * sum_{i=1..n} gains[i-1] / i`.
pub fn aggregate_gains(gains: &[f64]) -> Result<f64, DsdError> {
    if gains.is_empty() {
        return Err(DsdError::EmptyGains);
    }
    let n = gains.len() as f64;
    let weighted: f64 = gains
        .iter()
        .enumerate()
        .map(|(i, g)| g / (i + 1) as f64)
        .sum();
    Ok(weighted / n)
}

/// Embeds both sentences and every replacement, then credits each gain to
/// the tokens it replaced.
pub fn compute_gains<S: AsRef<str>>(
    s1: &[S],
    s2: &[S],
    replacements: &[Replacement],
    provider: &Provider,
) -> Result<GainMap, DsdError> {
    if s1.is_empty() {
        return Err(DsdError::EmptySentence(1));
    }
    if s2.is_empty() {
        return Err(DsdError::EmptySentence(2));
    }
    let join = |s: &[S]| s.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
    let mut texts: Vec<&str> = Vec::with_capacity(replacements.len() + 2);
    let (first, second) = (join(s1), join(s2));
    texts.push(&first);
    texts.push(&second);
    texts.extend(replacements.iter().map(|r| r.text.as_str()));
    let vectors = provider.embed_batch(&texts)?;
    let anchor = &vectors[0];
    let base_similarity = cosine_similarity(anchor, &vectors[1])?;

    let mut per_token: Vec<Vec<SizedGain>> = vec![Vec::new(); s2.len()];
    for (r, v) in replacements.iter().zip(&vectors[2..]) {
        let gain = cosine_similarity(anchor, v)? - base_similarity;
        for slot in &mut per_token[r.start..r.start + r.len] {
            slot.push(SizedGain {
                ngram_size: r.len,
                gain,
            });
        }
    }
    for gains in &mut per_token {
        // stable: keeps generation order within a size
        gains.sort_by_key(|g| g.ngram_size);
    }
    // a token no replacement touched (only possible with a partial
    // replacement list) carries no evidence either way
    let aggregated = per_token
        .iter()
        .map(|g| match g.is_empty() {
            true => Ok(0.0),
            false => aggregate_gains(&per_size_maxima(g)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GainMap {
        base_similarity,
        per_token,
        aggregated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsdConfig {
    pub threshold: f64,
    /// Largest n-gram size considered; `None` goes up to the shorter sentence.
    pub max_ngram_size: Option<usize>,
}

impl DsdConfig {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            max_ngram_size: None,
        }
    }
}

/// Replacement gains for sentence 2 against sentence 1.
pub fn token_gains(
    s1: &Sentence,
    s2: &Sentence,
    max_ngram_size: Option<usize>,
    provider: &Provider,
) -> Result<GainMap, DsdError> {
    let replacements = generate_replacements(&s1.tokens, &s2.tokens, max_ngram_size)?;
    compute_gains(&s1.tokens, &s2.tokens, &replacements, provider)
}

/// Dissimilar spans on sentence 2.
pub fn annotate(
    s1: &Sentence,
    s2: &Sentence,
    cfg: &DsdConfig,
    provider: &Provider,
) -> Result<Vec<SpanAnnotation>, DsdError> {
    if cfg.threshold.is_nan() {
        return Err(DsdError::InvalidThreshold);
    }
    Ok(token_gains(s1, s2, cfg.max_ngram_size, provider)?.spans(cfg.threshold))
}
