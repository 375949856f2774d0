//! Span-annotated sentence pairs in the SSD record layout.
//!
//! A record is one line with four tab-separated fields:
//!
//! ```text
//! annotated sentence 1 \t annotated sentence 2 \t span labels \t pair label
//! ```
//!
//! Spans are delimited by `{{` and `}}` and paired by position: the i-th
//! span of sentence 1 corresponds to the i-th span of sentence 2. Span labels
//! are a comma-separated list of `0` (dissimilar) / `1` (equivalent), empty
//! when there are no spans. The pair label is `0` or `1`.
//!
//! Sentences are tokenized on whitespace with punctuation left attached to
//! its word, so a marker placed inside a token (`{{1980s}}.`) covers the
//! whole token. The exact marker placement is kept as a byte range so that
//! records serialize back byte-for-byte.

use crate::spans::{SpanAnnotation, SpanLabel, TokenSpan};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

pub const SPAN_OPEN: &str = "{{";
pub const SPAN_CLOSE: &str = "}}";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MarkerError {
    #[error("unbalanced span markers: `}}}}` at byte {0} without a matching `{{{{`")]
    UnmatchedClose(usize),
    #[error("unbalanced span markers: `{{{{` at byte {0} is never closed")]
    UnclosedOpen(usize),
    #[error("nested span markers: `{{{{` at byte {0} inside an open span")]
    Nested(usize),
    #[error("span {0} contains no tokens")]
    EmptySpan(usize),
    #[error("spans {0} and {1} share a token")]
    Overlapping(usize, usize),
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("expected 4 tab-separated fields, found {0}")]
    FieldCount(usize),
    #[error("sentence {sentence}: {source}")]
    Markers {
        sentence: u8,
        #[source]
        source: MarkerError,
    },
    #[error("sentence 1 has {first} spans but sentence 2 has {second}")]
    SpanCountMismatch { first: usize, second: usize },
    #[error("{spans} span pairs but {labels} span labels")]
    LabelCountMismatch { spans: usize, labels: usize },
    #[error("invalid span label {0:?}, expected 0 or 1")]
    InvalidSpanLabel(String),
    #[error("invalid pair label {0:?}, expected 0 or 1")]
    InvalidPairLabel(String),
    #[error("sentence {0} is empty")]
    EmptySentence(u8),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("fold count {k} out of range for {n} pairs (need 2 <= k <= n)")]
    FoldCount { k: usize, n: usize },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

/// Whitespace tokenization; punctuation stays attached to its word.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Byte ranges of the whitespace tokens of `text`.
pub fn token_offsets(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(s..i);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}

/// True for tokens made only of punctuation or symbols (e.g. `--`, `.`).
pub fn is_punctuation_token(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

/// Text with markers removed plus the byte range each marker pair enclosed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedText {
    pub text: String,
    pub regions: Vec<Range<usize>>,
}

/// Strips `{{`/`}}` markers, rejecting unbalanced and nested markers.
pub fn strip_markers(annotated: &str) -> Result<MarkedText, MarkerError> {
    let bytes = annotated.as_bytes();
    let mut text = String::with_capacity(annotated.len());
    let mut regions = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (source byte, output byte)
    let mut i = 0;
    let mut copied_from = 0;
    while i < bytes.len() {
        if bytes[i..].starts_with(b"{{") {
            if open.is_some() {
                return Err(MarkerError::Nested(i));
            }
            text.push_str(&annotated[copied_from..i]);
            open = Some((i, text.len()));
            i += 2;
            copied_from = i;
        } else if bytes[i..].starts_with(b"}}") {
            let Some((_, out_start)) = open.take() else {
                return Err(MarkerError::UnmatchedClose(i));
            };
            text.push_str(&annotated[copied_from..i]);
            regions.push(out_start..text.len());
            i += 2;
            copied_from = i;
        } else {
            i += 1;
        }
    }
    if let Some((src, _)) = open {
        return Err(MarkerError::UnclosedOpen(src));
    }
    text.push_str(&annotated[copied_from..]);
    Ok(MarkedText { text, regions })
}

/// Re-inserts markers around `regions` (sorted, disjoint byte ranges).
pub fn insert_markers(text: &str, regions: &[Range<usize>]) -> String {
    let mut out = String::with_capacity(text.len() + 4 * regions.len());
    let mut at = 0;
    for r in regions {
        out.push_str(&text[at..r.start]);
        out.push_str(SPAN_OPEN);
        out.push_str(&text[r.start..r.end]);
        out.push_str(SPAN_CLOSE);
        at = r.end;
    }
    out.push_str(&text[at..]);
    out
}

/// Marker placement for token spans: from the first token's start to the last
/// token's end.
pub fn regions_for_spans(text: &str, spans: &[TokenSpan]) -> Vec<Range<usize>> {
    let offsets = token_offsets(text);
    spans
        .iter()
        .map(|s| offsets[s.start].start..offsets[s.end - 1].end)
        .collect()
}

/// A span on one sentence, as token range plus the exact marker placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSpan {
    pub span: TokenSpan,
    pub bytes: Range<usize>,
}

/// Maps marked byte regions onto the tokens they touch.
pub fn marked_spans(marked: &MarkedText) -> Result<Vec<MarkedSpan>, MarkerError> {
    let offsets = token_offsets(&marked.text);
    let mut out: Vec<MarkedSpan> = Vec::with_capacity(marked.regions.len());
    for (n, region) in marked.regions.iter().enumerate() {
        let mut touched = offsets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < region.end && t.end > region.start)
            .map(|(i, _)| i);
        let Some(first) = touched.next() else {
            return Err(MarkerError::EmptySpan(n));
        };
        let last = touched.last().unwrap_or(first);
        let span = TokenSpan::new(first, last + 1);
        if let Some(prev) = out.last() {
            if prev.span.end > span.start {
                return Err(MarkerError::Overlapping(n - 1, n));
            }
        }
        out.push(MarkedSpan {
            span,
            bytes: region.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { text, tokens }
    }

    /// Tokens re-joined with single spaces.
    pub fn normalized(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span_text(&self, span: TokenSpan) -> String {
        self.tokens[span.start..span.end].join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanPair {
    pub first: MarkedSpan,
    pub second: MarkedSpan,
    pub label: SpanLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Dissimilar,
    Equivalent,
}

impl PairLabel {
    pub fn as_digit(self) -> char {
        match self {
            PairLabel::Dissimilar => '0',
            PairLabel::Equivalent => '1',
        }
    }
}

/// Which sentence of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub sentence1: Sentence,
    pub sentence2: Sentence,
    pub span_pairs: Vec<SpanPair>,
    pub label: PairLabel,
}

impl AnnotatedPair {
    pub fn sentence(&self, side: Side) -> &Sentence {
        match side {
            Side::First => &self.sentence1,
            Side::Second => &self.sentence2,
        }
    }

    /// Span annotations on one side, in order.
    pub fn spans(&self, side: Side) -> Vec<SpanAnnotation> {
        self.span_pairs
            .iter()
            .map(|p| SpanAnnotation {
                span: match side {
                    Side::First => p.first.span,
                    Side::Second => p.second.span,
                },
                label: p.label,
            })
            .collect()
    }

    /// Dissimilar reference spans on one side, in order.
    pub fn dissimilar_spans(&self, side: Side) -> Vec<TokenSpan> {
        self.spans(side)
            .into_iter()
            .filter(|s| s.label == SpanLabel::Dissimilar)
            .map(|s| s.span)
            .collect()
    }

    pub fn has_dissimilar_spans(&self) -> bool {
        self.span_pairs
            .iter()
            .any(|p| p.label == SpanLabel::Dissimilar)
    }
}

fn parse_sentence(field: &str, which: u8) -> Result<(Sentence, Vec<MarkedSpan>), CorpusError> {
    let markers = |source| CorpusError::Markers {
        sentence: which,
        source,
    };
    let marked = strip_markers(field).map_err(markers)?;
    let spans = marked_spans(&marked).map_err(markers)?;
    let sentence = Sentence::new(marked.text);
    if sentence.is_empty() {
        return Err(CorpusError::EmptySentence(which));
    }
    Ok((sentence, spans))
}

/// Parses one SSD record.
pub fn parse_pair(line: &str) -> Result<AnnotatedPair, CorpusError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(CorpusError::FieldCount(fields.len()));
    }
    let (sentence1, spans1) = parse_sentence(fields[0], 1)?;
    let (sentence2, spans2) = parse_sentence(fields[1], 2)?;
    if spans1.len() != spans2.len() {
        return Err(CorpusError::SpanCountMismatch {
            first: spans1.len(),
            second: spans2.len(),
        });
    }
    let labels_field = fields[2].trim();
    let labels: Vec<SpanLabel> = if labels_field.is_empty() {
        Vec::new()
    } else {
        labels_field
            .split(',')
            .map(|l| {
                let l = l.trim();
                SpanLabel::from_digit(l).ok_or_else(|| CorpusError::InvalidSpanLabel(l.to_owned()))
            })
            .collect::<Result<_, _>>()?
    };
    if labels.len() != spans1.len() {
        return Err(CorpusError::LabelCountMismatch {
            spans: spans1.len(),
            labels: labels.len(),
        });
    }
    let label = match fields[3].trim() {
        "0" => PairLabel::Dissimilar,
        "1" => PairLabel::Equivalent,
        other => return Err(CorpusError::InvalidPairLabel(other.to_owned())),
    };
    let span_pairs = spans1
        .into_iter()
        .zip(spans2)
        .zip(labels)
        .map(|((first, second), label)| SpanPair {
            first,
            second,
            label,
        })
        .collect();
    Ok(AnnotatedPair {
        sentence1,
        sentence2,
        span_pairs,
        label,
    })
}

/// Writes a pair back as an SSD record (no trailing newline).
pub fn serialize_pair(pair: &AnnotatedPair) -> String {
    let regions = |side: Side| -> Vec<Range<usize>> {
        pair.span_pairs
            .iter()
            .map(|p| match side {
                Side::First => p.first.bytes.clone(),
                Side::Second => p.second.bytes.clone(),
            })
            .collect()
    };
    let labels: Vec<String> = pair
        .span_pairs
        .iter()
        .map(|p| p.label.as_digit().to_string())
        .collect();
    format!(
        "{}\t{}\t{}\t{}",
        insert_markers(&pair.sentence1.text, &regions(Side::First)),
        insert_markers(&pair.sentence2.text, &regions(Side::Second)),
        labels.join(","),
        pair.label.as_digit()
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub pairs: Vec<AnnotatedPair>,
    pub source_name: String,
    /// 1-based source line of each pair.
    #[serde(default)]
    pub lines: Vec<usize>,
}

impl Dataset {
    /// Dataset from in-memory pairs, numbered as consecutive lines.
    pub fn new(pairs: Vec<AnnotatedPair>, source_name: impl Into<String>) -> Self {
        let lines = (1..=pairs.len()).collect();
        Self {
            pairs,
            source_name: source_name.into(),
            lines,
        }
    }

    pub fn line_of(&self, index: usize) -> usize {
        self.lines.get(index).copied().unwrap_or(index + 1)
    }

    /// Parses records from text; blank lines are skipped and errors carry the
    /// 1-based line number.
    pub fn parse(contents: &str, source_name: impl Into<String>) -> Result<Self, CorpusError> {
        let mut pairs = Vec::new();
        let mut lines = Vec::new();
        for (i, line) in contents.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair = parse_pair(line).map_err(|e| CorpusError::Line {
                line: i + 1,
                source: Box::new(e),
            })?;
            pairs.push(pair);
            lines.push(i + 1);
        }
        if pairs.is_empty() {
            return Err(CorpusError::EmptyDataset);
        }
        Ok(Self {
            pairs,
            source_name: source_name.into(),
            lines,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serialize_pair(p));
            out.push('\n');
        }
        out
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let contents = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Dataset::parse(&contents, path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, sd: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pair_count: usize,
    pub span_pair_count: usize,
    pub dissimilar_span_count: usize,
    pub equivalent_span_count: usize,
    pub dissimilar_pair_count: usize,
    pub equivalent_pair_count: usize,
    pub sentence_word_length: MeanSd,
    pub span_word_length: MeanSd,
    pub spans_per_sentence: MeanSd,
}

fn word_count<S: AsRef<str>>(tokens: &[S]) -> usize {
    tokens
        .iter()
        .filter(|t| !is_punctuation_token(t.as_ref()))
        .count()
}

/// Counts and length statistics. Word counts skip standalone punctuation
/// tokens; sentence and span statistics cover both sides of every pair.
pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let mut sentence_lengths = Vec::with_capacity(2 * ds.len());
    let mut span_lengths = Vec::new();
    let mut spans_per_sentence = Vec::with_capacity(2 * ds.len());
    let mut dissimilar_spans = 0;
    let mut span_pairs = 0;
    let mut dissimilar_pairs = 0;
    for pair in &ds.pairs {
        span_pairs += pair.span_pairs.len();
        dissimilar_spans += pair
            .span_pairs
            .iter()
            .filter(|p| p.label == SpanLabel::Dissimilar)
            .count();
        if pair.label == PairLabel::Dissimilar {
            dissimilar_pairs += 1;
        }
        for side in [Side::First, Side::Second] {
            let sentence = pair.sentence(side);
            sentence_lengths.push(word_count(&sentence.tokens) as f64);
            spans_per_sentence.push(pair.span_pairs.len() as f64);
            for s in pair.spans(side) {
                span_lengths.push(word_count(&sentence.tokens[s.span.start..s.span.end]) as f64);
            }
        }
    }
    DatasetStats {
        pair_count: ds.len(),
        span_pair_count: span_pairs,
        dissimilar_span_count: dissimilar_spans,
        equivalent_span_count: span_pairs - dissimilar_spans,
        dissimilar_pair_count: dissimilar_pairs,
        equivalent_pair_count: ds.len() - dissimilar_pairs,
        sentence_word_length: MeanSd::of(&sentence_lengths),
        span_word_length: MeanSd::of(&span_lengths),
        spans_per_sentence: MeanSd::of(&spans_per_sentence),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BioTag {
    B,
    I,
    O,
}

impl BioTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BioTag::B => "B",
            BioTag::I => "I",
            BioTag::O => "O",
        }
    }
}

/// Tokens of one sentence with their BIO tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<BioTag>,
}

/// Tags sentence 2 of a pair; only dissimilar spans are tagged.
pub fn bio_tags(pair: &AnnotatedPair) -> BioSentence {
    let tokens = pair.sentence2.tokens.clone();
    let mut tags = vec![BioTag::O; tokens.len()];
    for span in pair.dissimilar_spans(Side::Second) {
        tags[span.start] = BioTag::B;
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = BioTag::I;
        }
    }
    BioSentence { tokens, tags }
}

pub fn export_bio(ds: &Dataset) -> Vec<BioSentence> {
    ds.pairs.iter().map(bio_tags).collect()
}

/// `token \t tag` lines with a blank line after each sentence.
pub fn write_bio(sentences: &[BioSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (token, tag) in s.tokens.iter().zip(&s.tags) {
            let _ = writeln!(out, "{token}\t{}", tag.as_str());
        }
        out.push('\n');
    }
    out
}

/// Seeded shuffle of `0..n` cut into `k` folds whose sizes differ by at most one.
/// Indices inside each fold are sorted.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, CorpusError> {
    if k < 2 || k > n {
        return Err(CorpusError::FoldCount { k, n });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = indices[at..at + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        at += size;
    }
    Ok(folds)
}
