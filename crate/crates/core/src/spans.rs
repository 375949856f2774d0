//! Token spans and the threshold-and-group rule shared by every
//! attribution-based annotator.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Half-open token range `[start, end)` over a whitespace-tokenized sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end, "empty span [{start}, {end})");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.start..self.end).contains(&index)
    }

    pub fn tokens<'a, S: AsRef<str>>(&self, tokens: &'a [S]) -> Vec<&'a str> {
        tokens[self.start..self.end].iter().map(AsRef::as_ref).collect()
    }
}

impl fmt::Display for TokenSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Similarity label of a span pair. Serialized as 0 (dissimilar) or 1 (equivalent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanLabel {
    Dissimilar,
    Equivalent,
}

impl SpanLabel {
    pub fn as_digit(self) -> char {
        match self {
            SpanLabel::Dissimilar => '0',
            SpanLabel::Equivalent => '1',
        }
    }

    pub fn from_digit(s: &str) -> Option<Self> {
        match s {
            "0" => Some(SpanLabel::Dissimilar),
            "1" => Some(SpanLabel::Equivalent),
            _ => None,
        }
    }
}

/// A labeled token range on one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanAnnotation {
    #[serde(flatten)]
    pub span: TokenSpan,
    pub label: SpanLabel,
}

impl SpanAnnotation {
    pub fn dissimilar(start: usize, end: usize) -> Self {
        Self {
            span: TokenSpan::new(start, end),
            label: SpanLabel::Dissimilar,
        }
    }
}

/// Indices whose weight is strictly above `threshold`.
pub fn marked_tokens(weights: &[f64], threshold: f64) -> Vec<usize> {
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Groups maximal runs of marked positions into spans.
pub fn group_marked(marked: &[bool]) -> Vec<TokenSpan> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &m) in marked.iter().enumerate() {
        match (m, open) {
            (true, None) => open = Some(i),
            (false, Some(start)) => {
                spans.push(TokenSpan::new(start, i));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        spans.push(TokenSpan::new(start, marked.len()));
    }
    spans
}

/// Marks tokens with weight `> threshold` and groups contiguous runs into
/// dissimilar spans.
pub fn weights_to_spans(weights: &[f64], threshold: f64) -> Vec<SpanAnnotation> {
    let marked: Vec<bool> = weights.iter().map(|w| *w > threshold).collect();
    group_marked(&marked)
        .into_iter()
        .map(|span| SpanAnnotation {
            span,
            label: SpanLabel::Dissimilar,
        })
        .collect()
}
