//! Uniform interface over the span detectors, so evaluation and the CLI can
//! treat them alike.

use crate::baselines;
use crate::corpus::Sentence;
use crate::embed_dsd::{self, DsdError};
use crate::embeddings::Provider;
use crate::explainers::{self, ExplainError, LimeConfig, ShapConfig};
use crate::llm_dsd::{self, ChatBackend, LlmConfig, LlmError};
use crate::spans::{weights_to_spans, SpanAnnotation};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MethodError {
    #[error(transparent)]
    Dsd(#[from] DsdError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Produces dissimilar spans on `s2` given `s1`.
pub trait Annotator: Sync {
    fn annotate(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<SpanAnnotation>, MethodError>;
}

/// A detector that scores every `s2` token; spans come from a threshold.
pub trait TokenScorer: Sync {
    fn token_weights(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<f64>, MethodError>;
}

/// A [`TokenScorer`] paired with a threshold.
pub struct Thresholded<T> {
    pub scorer: T,
    pub threshold: f64,
}

impl<T: TokenScorer> Annotator for Thresholded<T> {
    fn annotate(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<SpanAnnotation>, MethodError> {
        let w = self.scorer.token_weights(s1, s2)?;
        Ok(weights_to_spans(&w, self.threshold))
    }
}

impl<A: Annotator + ?Sized> Annotator for &A {
    fn annotate(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<SpanAnnotation>, MethodError> {
        (**self).annotate(s1, s2)
    }
}

impl<A: Annotator + ?Sized + Send> Annotator for Box<A> {
    fn annotate(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<SpanAnnotation>, MethodError> {
        (**self).annotate(s1, s2)
    }
}

impl<T: TokenScorer + ?Sized> TokenScorer for &T {
    fn token_weights(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<f64>, MethodError> {
        (**self).token_weights(s1, s2)
    }
}

impl<T: TokenScorer + ?Sized + Send> TokenScorer for Box<T> {
    fn token_weights(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<f64>, MethodError> {
        (**self).token_weights(s1, s2)
    }
}

pub struct NoDsd;

impl Annotator for NoDsd {
    fn annotate(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<SpanAnnotation>, MethodError> {
        Ok(baselines::no_dsd(s1, s2))
    }
}

pub struct NaiveDsd;

impl Annotator for NaiveDsd {
    fn annotate(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<SpanAnnotation>, MethodError> {
        Ok(baselines::naive_dsd(s1, s2))
    }
}

/// Aggregated replacement gains.
pub struct EmbeddingDsd<'a> {
    pub provider: &'a Provider,
    pub max_ngram_size: Option<usize>,
}

impl TokenScorer for EmbeddingDsd<'_> {
    fn token_weights(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<f64>, MethodError> {
        Ok(embed_dsd::token_gains(s1, s2, self.max_ngram_size, self.provider)?.aggregated)
    }
}

pub struct LimeDsd<'a> {
    pub provider: &'a Provider,
    pub config: LimeConfig,
    pub seed: u64,
}

impl TokenScorer for LimeDsd<'_> {
    fn token_weights(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<f64>, MethodError> {
        Ok(explainers::lime_token_weights(s1, s2, self.provider, &self.config, self.seed)?.weights)
    }
}

pub struct ShapDsd<'a> {
    pub provider: &'a Provider,
    pub config: ShapConfig,
    pub seed: u64,
}

impl TokenScorer for ShapDsd<'_> {
    fn token_weights(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<f64>, MethodError> {
        Ok(explainers::shap_token_values(s1, s2, self.provider, &self.config, self.seed)?.weights)
    }
}

pub struct LlmDsd<'a> {
    pub backend: &'a dyn ChatBackend,
    pub config: LlmConfig,
}

impl Annotator for LlmDsd<'_> {
    fn annotate(&self, s1: &Sentence, s2: &Sentence) -> Result<Vec<SpanAnnotation>, MethodError> {
        Ok(llm_dsd::annotate_with_llm(s1, s2, self.backend, &self.config)?.spans)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    NoDsd,
    Naive,
    Embedding,
    Lime,
    Shap,
    Llm,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::NoDsd => "no-dsd",
            MethodKind::Naive => "naive",
            MethodKind::Embedding => "embedding",
            MethodKind::Lime => "lime",
            MethodKind::Shap => "shap",
            MethodKind::Llm => "llm",
        }
    }

    /// Whether spans come from thresholding token weights.
    pub fn is_thresholded(self) -> bool {
        matches!(self, MethodKind::Embedding | MethodKind::Lime | MethodKind::Shap)
    }

    pub fn needs_embeddings(self) -> bool {
        self.is_thresholded()
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
