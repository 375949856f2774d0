//! Paraphrase detection by a similarity threshold, optionally gated on the
//! absence of dissimilar spans.

use crate::corpus::Sentence;
use crate::embed_dsd::{self, DsdError};
use crate::embeddings::{EmbeddingError, Provider};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DownstreamError {
    #[error("no labeled pairs")]
    EmptySet,
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("thresholds must be finite")]
    NonFinite,
    #[error("line {line}: {message}")]
    Paws { line: usize, message: String },
    #[error("pair {id}: {source}")]
    Pair {
        id: String,
        #[source]
        source: DsdError,
    },
    #[error(transparent)]
    Dsd(#[from] DsdError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ParaphraseLabel {
    Paraphrase,
    NotParaphrase,
}

impl ParaphraseLabel {
    pub fn from_bool(paraphrase: bool) -> Self {
        if paraphrase {
            Self::Paraphrase
        } else {
            Self::NotParaphrase
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum GateMode {
    Sts,
    StsDsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct ParaphraseConfig {
    /// Paraphrase requires similarity `>=` this.
    pub sts_threshold: f64,
    /// Spans are tokens with aggregated gain `>` this.
    pub dsd_threshold: f64,
    /// Check for spans on both sentences, not only on sentence 2.
    pub bidirectional: bool,
    pub max_ngram_size: Option<usize>,
}

impl Default for ParaphraseConfig {
    fn default() -> Self {
        Self {
            sts_threshold: 0.65,
            dsd_threshold: 0.008,
            bidirectional: true,
            max_ngram_size: None,
        }
    }
}

impl ParaphraseConfig {
    fn validate(&self) -> Result<(), DownstreamError> {
        if self.sts_threshold.is_finite() && self.dsd_threshold.is_finite() {
            Ok(())
        } else {
            Err(DownstreamError::NonFinite)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub id: String,
    pub sentence1: Sentence,
    pub sentence2: Sentence,
    pub paraphrase: bool,
}

pub fn classify_sts(
    s1: &Sentence,
    s2: &Sentence,
    cfg: &ParaphraseConfig,
    provider: &Provider,
) -> Result<ParaphraseLabel, DownstreamError> {
    cfg.validate()?;
    let sim = provider.similarity(&s1.normalized(), &s2.normalized())?;
    Ok(ParaphraseLabel::from_bool(sim >= cfg.sts_threshold))
}

fn has_spans(s1: &Sentence, s2: &Sentence, cfg: &ParaphraseConfig, provider: &Provider) -> Result<bool, DsdError> {
    let max = |a, b| -> Result<f64, DsdError> {
        Ok(embed_dsd::token_gains(a, b, cfg.max_ngram_size, provider)?.max_aggregated())
    };
    if max(s1, s2)? > cfg.dsd_threshold {
        return Ok(true);
    }
    Ok(cfg.bidirectional && max(s2, s1)? > cfg.dsd_threshold)
}

/// Paraphrase iff the similarity clears the threshold and no dissimilar span
/// is detected. Spans are only computed when the similarity test passes.
pub fn classify_sts_dsd(
    s1: &Sentence,
    s2: &Sentence,
    cfg: &ParaphraseConfig,
    provider: &Provider,
) -> Result<ParaphraseLabel, DownstreamError> {
    if classify_sts(s1, s2, cfg, provider)? == ParaphraseLabel::NotParaphrase {
        return Ok(ParaphraseLabel::NotParaphrase);
    }
    Ok(ParaphraseLabel::from_bool(!has_spans(s1, s2, cfg, provider)?))
}

/// Everything threshold tuning needs from one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PairFeatures {
    pub similarity: f64,
    /// Largest aggregated gain over the checked sentences.
    pub max_gain: f64,
}

impl PairFeatures {
    pub fn classify(&self, sts_threshold: f64, dsd_threshold: f64, mode: GateMode) -> ParaphraseLabel {
        let sts = self.similarity >= sts_threshold;
        ParaphraseLabel::from_bool(match mode {
            GateMode::Sts => sts,
            GateMode::StsDsd => sts && self.max_gain <= dsd_threshold,
        })
    }
}

pub fn pair_features(
    pair: &LabeledPair,
    bidirectional: bool,
    max_ngram_size: Option<usize>,
    provider: &Provider,
) -> Result<PairFeatures, DownstreamError> {
    let wrap = |source| DownstreamError::Pair {
        id: pair.id.clone(),
        source,
    };
    let similarity = provider.similarity(&pair.sentence1.normalized(), &pair.sentence2.normalized())?;
    let mut max_gain = embed_dsd::token_gains(&pair.sentence1, &pair.sentence2, max_ngram_size, provider)
        .map_err(wrap)?
        .max_aggregated();
    if bidirectional {
        let back = embed_dsd::token_gains(&pair.sentence2, &pair.sentence1, max_ngram_size, provider)
            .map_err(wrap)?
            .max_aggregated();
        max_gain = max_gain.max(back);
    }
    Ok(PairFeatures { similarity, max_gain })
}

/// Features for every pair, in input order.
pub fn all_features(
    set: &[LabeledPair],
    bidirectional: bool,
    max_ngram_size: Option<usize>,
    provider: &Provider,
) -> Result<Vec<PairFeatures>, DownstreamError> {
    set.par_iter()
        .map(|p| pair_features(p, bidirectional, max_ngram_size, provider))
        .collect()
}

/// Fraction of `labels` matched by the classification of `features`.
pub fn accuracy_of(
    features: &[PairFeatures],
    labels: &[bool],
    sts_threshold: f64,
    dsd_threshold: f64,
    mode: GateMode,
) -> Result<f64, DownstreamError> {
    if features.is_empty() {
        return Err(DownstreamError::EmptySet);
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &l)| (f.classify(sts_threshold, dsd_threshold, mode) == ParaphraseLabel::Paraphrase) == l)
        .count();
    Ok(correct as f64 / features.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TunedThresholds {
    pub sts_threshold: f64,
    pub dsd_threshold: f64,
    pub accuracy: f64,
}

/// Grid search for the most accurate thresholds. Ties go to the larger
/// similarity threshold, then the larger span threshold.
pub fn tune_thresholds(
    features: &[PairFeatures],
    labels: &[bool],
    sts_grid: &[f64],
    dsd_grid: &[f64],
    mode: GateMode,
) -> Result<TunedThresholds, DownstreamError> {
    if sts_grid.is_empty() || dsd_grid.is_empty() {
        return Err(DownstreamError::EmptyGrid);
    }
    if sts_grid.iter().chain(dsd_grid).any(|t| !t.is_finite()) {
        return Err(DownstreamError::NonFinite);
    }
    let mut best: Option<TunedThresholds> = None;
    for &sts in sts_grid {
        for &dsd in dsd_grid {
            let accuracy = accuracy_of(features, labels, sts, dsd, mode)?;
            let better = match best {
                None => true,
                Some(b) => (accuracy, sts, dsd) > (b.accuracy, b.sts_threshold, b.dsd_threshold),
            };
            if better {
                best = Some(TunedThresholds {
                    sts_threshold: sts,
                    dsd_threshold: dsd,
                    accuracy,
                });
            }
        }
    }
    Ok(best.expect("grids are non-empty"))
}

pub fn paraphrase_accuracy(
    set: &[LabeledPair],
    cfg: &ParaphraseConfig,
    mode: GateMode,
    provider: &Provider,
) -> Result<f64, DownstreamError> {
    if set.is_empty() {
        return Err(DownstreamError::EmptySet);
    }
    cfg.validate()?;
    let predictions: Vec<ParaphraseLabel> = set
        .par_iter()
        .map(|p| match mode {
            GateMode::Sts => classify_sts(&p.sentence1, &p.sentence2, cfg, provider),
            GateMode::StsDsd => classify_sts_dsd(&p.sentence1, &p.sentence2, cfg, provider),
        })
        .collect::<Result<_, _>>()?;
    let correct = predictions
        .iter()
        .zip(set)
        .filter(|(pred, p)| (**pred == ParaphraseLabel::Paraphrase) == p.paraphrase)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Column layout of a paraphrase TSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PawsColumns {
    pub id: Option<usize>,
    pub sentence1: usize,
    pub sentence2: usize,
    pub label: usize,
    pub header: bool,
}

impl Default for PawsColumns {
    fn default() -> Self {
        Self {
            id: Some(0),
            sentence1: 1,
            sentence2: 2,
            label: 3,
            header: true,
        }
    }
}

/// Reads labeled pairs; labels are `1` (paraphrase) or `0`.
pub fn read_paws(contents: &str, columns: &PawsColumns) -> Result<Vec<LabeledPair>, DownstreamError> {
    let mut out = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if (i == 0 && columns.header) || line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DownstreamError::Paws { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |c: usize| {
            fields
                .get(c)
                .copied()
                .ok_or_else(|| err(format!("missing column {c}")))
        };
        let paraphrase = match field(columns.label)?.trim() {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label {other:?} is not 0 or 1"))),
        };
        let sentence1 = Sentence::new(field(columns.sentence1)?);
        let sentence2 = Sentence::new(field(columns.sentence2)?);
        if sentence1.is_empty() || sentence2.is_empty() {
            return Err(err("empty sentence".into()));
        }
        let id = match columns.id {
            Some(c) => field(c)?.to_owned(),
            None => (i + 1).to_string(),
        };
        out.push(LabeledPair {
            id,
            sentence1,
            sentence2,
            paraphrase,
        });
    }
    if out.is_empty() {
        return Err(DownstreamError::EmptySet);
    }
    Ok(out)
}
