//! Span-level scoring.
//!
//! Predicted spans are aligned to reference spans by minimal total boundary
//! offset, each aligned pair is scored by unigram overlap, and per-span
//! scores are averaged per sentence. Both directions of a pair are scored
//! (annotating sentence 2 given 1, then sentence 1 given 2) and averaged.
//! Reports split pairs by whether their reference has dissimilar spans.

use crate::corpus::{split_folds, AnnotatedPair, CorpusError, Dataset, MeanSd, Side};
use crate::methods::{Annotator, MethodError, TokenScorer};
use crate::spans::{weights_to_spans, SpanAnnotation, SpanLabel, TokenSpan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("pair {pair} (line {line}): {source}")]
    Method {
        pair: usize,
        line: usize,
        #[source]
        source: MethodError,
    },
    #[error("method returned an invalid span {span} for a sentence of {len} tokens")]
    InvalidSpan { span: TokenSpan, len: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// `|ref.start - ann.start| + |ref.end - ann.end|`.
pub fn span_offset(reference: TokenSpan, annotated: TokenSpan) -> usize {
    reference.start.abs_diff(annotated.start) + reference.end.abs_diff(annotated.end)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SpanAlignment {
    /// `(reference, annotated)` pairs in order.
    pub matches: Vec<(TokenSpan, TokenSpan)>,
    pub unmatched_references: Vec<TokenSpan>,
    pub unmatched_annotations: Vec<TokenSpan>,
    pub total_offset: usize,
}

/// Order-preserving alignment pairing `min(|refs|, |anns|)` spans with the
/// smallest total offset. Solved by dynamic programming over prefixes, which
/// finds the same optimum as enumerating every assignment.
pub fn align_spans(refs: &[TokenSpan], anns: &[TokenSpan]) -> SpanAlignment {
    // The shorter list is matched completely; choose which of the longer
    // list's spans to skip.
    let flip = refs.len() > anns.len();
    let (short, long) = if flip { (anns, refs) } else { (refs, anns) };
    let (n, m) = (short.len(), long.len());
    let cost = |i: usize, j: usize| {
        if flip {
            span_offset(long[j], short[i])
        } else {
            span_offset(short[i], long[j])
        }
    };
    // best[i][j]: cheapest way to match short[i..] into long[j..]
    let inf = usize::MAX;
    let mut best = vec![vec![inf; m + 1]; n + 1];
    for j in 0..=m {
        best[n][j] = 0;
    }
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            if m - j < n - i {
                continue;
            }
            let take = match best[i + 1][j + 1] {
                x if x == inf => inf,
                x => x + cost(i, j),
            };
            best[i][j] = take.min(best[i][j + 1]);
        }
    }

    let mut matched = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while i < n {
        let take = best[i + 1][j + 1].saturating_add(cost(i, j));
        if take == best[i][j] {
            matched.push((i, j));
            i += 1;
        }
        j += 1;
    }

    let used_long: Vec<bool> = {
        let mut u = vec![false; m];
        matched.iter().for_each(|&(_, j)| u[j] = true);
        u
    };
    let leftover: Vec<TokenSpan> = (0..m).filter(|&j| !used_long[j]).map(|j| long[j]).collect();
    let matches = matched
        .iter()
        .map(|&(i, j)| if flip { (long[j], short[i]) } else { (short[i], long[j]) })
        .collect();
    let (unmatched_references, unmatched_annotations) = if flip {
        (leftover, Vec::new())
    } else {
        (Vec::new(), leftover)
    };
    SpanAlignment {
        matches,
        unmatched_references,
        unmatched_annotations,
        total_offset: if n == 0 { 0 } else { best[0][0] },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Direction {
    /// Annotating sentence 2 given sentence 1.
    S2,
    /// Annotating sentence 1 given sentence 2.
    S1,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub direction: Direction,
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum F1Mode {
    /// Average of per-span F1 values.
    MeanOfSpans,
    /// Harmonic mean of the averaged precision and recall.
    HarmonicOfMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct ScoringOptions {
    /// Lowercase unigrams and strip surrounding punctuation before matching.
    pub normalize_tokens: bool,
    pub f1_mode: F1Mode,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            normalize_tokens: true,
            f1_mode: F1Mode::MeanOfSpans,
        }
    }
}

/// Lowercased token without leading/trailing punctuation; punctuation-only
/// tokens keep their (lowercased) form.
pub fn normalize_unigram(token: &str) -> String {
    let lower = token.to_lowercase();
    let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        lower
    } else {
        trimmed.to_owned()
    }
}

/// Unigram multiset overlap between a reference and an annotated span.
pub fn span_prf<S: AsRef<str>>(reference: &[S], annotated: &[S], normalize: bool) -> PairScore {
    let key = |t: &S| {
        if normalize {
            normalize_unigram(t.as_ref())
        } else {
            t.as_ref().to_owned()
        }
    };
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in reference {
        *counts.entry(key(t)).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in annotated {
        if let Some(c) = counts.get_mut(&key(t)).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }
    let ratio = |den: usize| if den == 0 { 0.0 } else { overlap as f64 / den as f64 };
    let (precision, recall) = (ratio(annotated.len()), ratio(reference.len()));
    PairScore {
        precision,
        recall,
        f1: harmonic(precision, recall),
        direction: Direction::S2,
    }
}

/// Score of one annotated sentence against its dissimilar reference spans.
pub fn score_direction<S: AsRef<str>>(
    tokens: &[S],
    refs: &[TokenSpan],
    anns: &[TokenSpan],
    direction: Direction,
    opts: &ScoringOptions,
) -> PairScore {
    let score = |p: f64, r: f64, f1: f64| PairScore {
        precision: p,
        recall: r,
        f1,
        direction,
    };
    if refs.is_empty() {
        let v = if anns.is_empty() { 1.0 } else { 0.0 };
        return score(v, v, v);
    }
    let alignment = align_spans(refs, anns);
    let slice = |s: TokenSpan| &tokens[s.start..s.end];
    let matched: Vec<PairScore> = alignment
        .matches
        .iter()
        .map(|&(r, a)| span_prf(slice(r), slice(a), opts.normalize_tokens))
        .collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>, count: usize| {
        if count == 0 {
            0.0
        } else {
            xs.sum::<f64>() / count as f64
        }
    };
    let n_unref = alignment.unmatched_references.len();
    let n_unann = alignment.unmatched_annotations.len();
    // unmatched references add zeros to recall, unmatched annotations to precision
    let precision = mean(&mut matched.iter().map(|s| s.precision), matched.len() + n_unann);
    let recall = mean(&mut matched.iter().map(|s| s.recall), matched.len() + n_unref);
    let f1 = match opts.f1_mode {
        F1Mode::MeanOfSpans => mean(&mut matched.iter().map(|s| s.f1), matched.len() + n_unref + n_unann),
        F1Mode::HarmonicOfMeans => harmonic(precision, recall),
    };
    score(precision, recall, f1)
}

/// Scores in both directions plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BidirectionalScore {
    pub s2: PairScore,
    pub s1: PairScore,
    pub mean: PairScore,
    pub has_dissimilar_refs: bool,
}

/// Spans predicted for both sentences of one pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PairPrediction {
    pub sentence1: Vec<SpanAnnotation>,
    pub sentence2: Vec<SpanAnnotation>,
}

fn dissimilar(spans: &[SpanAnnotation]) -> Vec<TokenSpan> {
    spans
        .iter()
        .filter(|s| s.label == SpanLabel::Dissimilar)
        .map(|s| s.span)
        .collect()
}

fn check_spans(spans: &[SpanAnnotation], len: usize) -> Result<(), EvalError> {
    match spans.iter().find(|s| s.span.is_empty() || s.span.end > len) {
        Some(s) => Err(EvalError::InvalidSpan { span: s.span, len }),
        None => Ok(()),
    }
}

/// Scores a prediction already made for both sentences.
pub fn score_prediction(
    pair: &AnnotatedPair,
    prediction: &PairPrediction,
    opts: &ScoringOptions,
) -> Result<BidirectionalScore, EvalError> {
    check_spans(&prediction.sentence2, pair.sentence2.len())?;
    check_spans(&prediction.sentence1, pair.sentence1.len())?;
    let s2 = score_direction(
        &pair.sentence2.tokens,
        &pair.dissimilar_spans(Side::Second),
        &dissimilar(&prediction.sentence2),
        Direction::S2,
        opts,
    );
    let s1 = score_direction(
        &pair.sentence1.tokens,
        &pair.dissimilar_spans(Side::First),
        &dissimilar(&prediction.sentence1),
        Direction::S1,
        opts,
    );
    let mean = PairScore {
        precision: (s2.precision + s1.precision) / 2.0,
        recall: (s2.recall + s1.recall) / 2.0,
        f1: (s2.f1 + s1.f1) / 2.0,
        direction: Direction::Mean,
    };
    Ok(BidirectionalScore {
        s2,
        s1,
        mean,
        has_dissimilar_refs: pair.has_dissimilar_spans(),
    })
}

/// Runs `method` on `(s1, s2)` and on the swapped pair, then scores both.
pub fn predict_pair(pair: &AnnotatedPair, method: &dyn Annotator) -> Result<PairPrediction, MethodError> {
    Ok(PairPrediction {
        sentence2: method.annotate(&pair.sentence1, &pair.sentence2)?,
        sentence1: method.annotate(&pair.sentence2, &pair.sentence1)?,
    })
}

pub fn score_pair(
    pair: &AnnotatedPair,
    method: &dyn Annotator,
    opts: &ScoringOptions,
) -> Result<BidirectionalScore, EvalError> {
    let prediction = predict_pair(pair, method).map_err(|source| EvalError::Method {
        pair: 0,
        line: 0,
        source,
    })?;
    score_prediction(pair, &prediction, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub count: usize,
}

impl Metrics {
    /// Mean over `scores`; zeros with count 0 for an empty slice.
    pub fn mean_of<'a>(scores: impl IntoIterator<Item = &'a PairScore>) -> Self {
        let mut m = Metrics::default();
        for s in scores {
            m.precision += s.precision;
            m.recall += s.recall;
            m.f1 += s.f1;
            m.count += 1;
        }
        if m.count > 0 {
            let n = m.count as f64;
            m.precision /= n;
            m.recall /= n;
            m.f1 /= n;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SliceReport {
    pub global: Metrics,
    pub no_diff: Metrics,
    pub diff: Metrics,
}

impl SliceReport {
    fn of(scores: &[(PairScore, bool)], members: impl Iterator<Item = usize> + Clone) -> Self {
        Self {
            global: Metrics::mean_of(members.clone().map(|i| &scores[i].0)),
            no_diff: Metrics::mean_of(members.clone().filter(|&i| !scores[i].1).map(|i| &scores[i].0)),
            diff: Metrics::mean_of(members.filter(|&i| scores[i].1).map(|i| &scores[i].0)),
        }
    }
}

/// Standard error of precision, recall and F1 across folds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StandardError {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SliceErrors {
    pub global: StandardError,
    pub no_diff: StandardError,
    pub diff: StandardError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    /// Means over every evaluated pair.
    pub global: Metrics,
    pub no_diff: Metrics,
    pub diff: Metrics,
    pub per_fold: Vec<SliceReport>,
    pub standard_error: SliceErrors,
}

fn fold_se(folds: &[SliceReport], pick: impl Fn(&SliceReport) -> Metrics) -> StandardError {
    // folds without pairs in a slice say nothing about its spread
    let present: Vec<Metrics> = folds.iter().map(&pick).filter(|m| m.count > 0).collect();
    let se = |f: fn(&Metrics) -> f64| {
        let values: Vec<f64> = present.iter().map(f).collect();
        if values.len() < 2 {
            0.0
        } else {
            MeanSd::of(&values).sd / (values.len() as f64).sqrt()
        }
    };
    StandardError {
        precision: se(|m| m.precision),
        recall: se(|m| m.recall),
        f1: se(|m| m.f1),
    }
}

/// Pools per-pair scores into Global/NoDiff/Diff metrics, per fold and over
/// everything. `folds` holds indices into `scores`; pass one fold with all
/// indices for a plain evaluation.
pub fn aggregate_report(scores: &[(PairScore, bool)], folds: &[Vec<usize>]) -> Result<EvalReport, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let overall = SliceReport::of(scores, 0..scores.len());
    let per_fold: Vec<SliceReport> = folds
        .iter()
        .map(|f| SliceReport::of(scores, f.iter().copied()))
        .collect();
    let standard_error = SliceErrors {
        global: fold_se(&per_fold, |r| r.global),
        no_diff: fold_se(&per_fold, |r| r.no_diff),
        diff: fold_se(&per_fold, |r| r.diff),
    };
    Ok(EvalReport {
        global: overall.global,
        no_diff: overall.no_diff,
        diff: overall.diff,
        per_fold,
        standard_error,
    })
}

/// Test folds for `n` pairs: `k` seeded folds, or one fold of everything
/// when `k` is 1.
pub fn fold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if k <= 1 {
        return Ok(vec![(0..n).collect()]);
    }
    Ok(split_folds(n, k, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub folds: usize,
    pub seed: u64,
    pub scoring: ScoringOptions,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            scoring: ScoringOptions::default(),
        }
    }
}

fn method_error(ds: &Dataset, pair: usize, source: MethodError) -> EvalError {
    EvalError::Method {
        pair,
        line: ds.line_of(pair),
        source,
    }
}

/// Runs `method` on every pair (in parallel) and reports over the folds.
pub fn evaluate(ds: &Dataset, method: &dyn Annotator, protocol: &Protocol) -> Result<(EvalReport, Vec<BidirectionalScore>), EvalError> {
    let folds = fold_indices(ds.len(), protocol.folds, protocol.seed)?;
    let scored: Vec<BidirectionalScore> = ds
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let prediction = predict_pair(pair, method).map_err(|e| method_error(ds, i, e))?;
            score_prediction(pair, &prediction, &protocol.scoring)
        })
        .collect::<Result<_, _>>()?;
    let flat: Vec<(PairScore, bool)> = scored.iter().map(|s| (s.mean, s.has_dissimilar_refs)).collect();
    Ok((aggregate_report(&flat, &folds)?, scored))
}

/// Token weights for both sentences of a pair, computed once for a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWeights {
    pub sentence1: Vec<f64>,
    pub sentence2: Vec<f64>,
}

impl PairWeights {
    pub fn prediction(&self, threshold: f64) -> PairPrediction {
        PairPrediction {
            sentence1: weights_to_spans(&self.sentence1, threshold),
            sentence2: weights_to_spans(&self.sentence2, threshold),
        }
    }
}

pub fn pair_weights(ds: &Dataset, scorer: &dyn TokenScorer) -> Result<Vec<PairWeights>, EvalError> {
    ds.pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let w = |a, b| scorer.token_weights(a, b).map_err(|e| method_error(ds, i, e));
            Ok(PairWeights {
                sentence2: w(&pair.sentence1, &pair.sentence2)?,
                sentence1: w(&pair.sentence2, &pair.sentence1)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepRow {
    pub threshold: f64,
    /// Predicted spans over both directions of every pair.
    pub span_count: usize,
    pub report: EvalReport,
}

/// One report per threshold from weights computed once.
pub fn sweep_weights(
    ds: &Dataset,
    weights: &[PairWeights],
    grid: &[f64],
    protocol: &Protocol,
) -> Result<Vec<SweepRow>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let folds = fold_indices(ds.len(), protocol.folds, protocol.seed)?;
    grid.iter()
        .map(|&threshold| {
            let mut span_count = 0;
            let mut flat = Vec::with_capacity(ds.len());
            for (pair, w) in ds.pairs.iter().zip(weights) {
                let prediction = w.prediction(threshold);
                span_count += prediction.sentence1.len() + prediction.sentence2.len();
                let s = score_prediction(pair, &prediction, &protocol.scoring)?;
                flat.push((s.mean, s.has_dissimilar_refs));
            }
            Ok(SweepRow {
                threshold,
                span_count,
                report: aggregate_report(&flat, &folds)?,
            })
        })
        .collect()
}

pub fn sweep_threshold(
    ds: &Dataset,
    scorer: &dyn TokenScorer,
    grid: &[f64],
    protocol: &Protocol,
) -> Result<Vec<SweepRow>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let weights = pair_weights(ds, scorer)?;
    sweep_weights(ds, &weights, grid, protocol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sp(s: usize, e: usize) -> TokenSpan {
        TokenSpan::new(s, e)
    }

    #[test]
    fn offsets() {
        assert_eq!(span_offset(sp(1, 3), sp(1, 3)), 0);
        assert_eq!(span_offset(sp(2, 5), sp(3, 6)), 2);
        assert_eq!(span_offset(sp(0, 1), sp(5, 9)), 13);
    }

    #[test]
    fn alignment_examples() {
        let a = align_spans(&[sp(0, 2), sp(5, 7)], &[sp(5, 6)]);
        assert_eq!(a.matches, vec![(sp(5, 7), sp(5, 6))]);
        assert_eq!(a.unmatched_references, vec![sp(0, 2)]);
        assert_eq!(a.total_offset, 1);
        let a = align_spans(&[sp(0, 2)], &[]);
        assert_eq!(a.unmatched_references, vec![sp(0, 2)]);
        assert!(a.matches.is_empty());
        let same = [sp(0, 1), sp(2, 4)];
        let a = align_spans(&same, &same);
        assert_eq!(a.total_offset, 0);
        assert_eq!(a.matches.len(), 2);
    }

    #[test]
    fn prf_examples() {
        let s = span_prf(&["Before", "the", "Civil", "War"], &["Before", "the"], true);
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert_abs_diff_eq!(s.f1, 2.0 / 3.0, epsilon = 1e-9);
        let s = span_prf(&["a"], &["b"], true);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        // multiset: a repeated token only matches as often as it occurs
        let s = span_prf(&["the", "x"], &["the", "the"], true);
        assert_eq!((s.precision, s.recall), (0.5, 0.5));
    }

    #[test]
    fn normalization_switch() {
        assert_eq!(normalize_unigram("War."), "war");
        assert_eq!(normalize_unigram("--"), "--");
        assert_eq!(span_prf(&["War."], &["war"], true).f1, 1.0);
        assert_eq!(span_prf(&["War."], &["war"], false).f1, 0.0);
    }

    #[test]
    fn no_reference_rule() {
        let opts = ScoringOptions::default();
        let t = ["a", "b"];
        assert_eq!(score_direction(&t, &[], &[], Direction::S2, &opts).f1, 1.0);
        assert_eq!(score_direction(&t, &[], &[sp(0, 1)], Direction::S2, &opts).f1, 0.0);
        let missed = score_direction(&t, &[sp(0, 1)], &[], Direction::S2, &opts);
        assert_eq!((missed.precision, missed.recall, missed.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn slices_pool_exactly() {
        let ps = |f1| PairScore { precision: f1, recall: f1, f1, direction: Direction::Mean };
        let scores = vec![(ps(1.0), false), (ps(0.2), true), (ps(0.4), true), (ps(1.0), false)];
        let r = aggregate_report(&scores, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_abs_diff_eq!(r.global.f1, 0.65, epsilon = 1e-12);
        assert_abs_diff_eq!(r.diff.f1, 0.3, epsilon = 1e-12);
        assert_eq!(r.no_diff.f1, 1.0);
        assert_eq!(r.global.count, r.diff.count + r.no_diff.count);
        // fold means 0.6 and 0.7
        assert_abs_diff_eq!(r.standard_error.global.f1, 0.05, epsilon = 1e-12);
        assert!(aggregate_report(&[], &[]).is_err());
    }
}
