//! Annotation records and their text renderings.

use anyhow::{bail, Result};
use dsd_core::corpus::{regions_for_spans, token_offsets, SPAN_CLOSE, SPAN_OPEN};
use dsd_core::spans::TokenSpan;
use serde::{Deserialize, Serialize};

/// One line of `annotate` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnnotationRecord {
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence2: Option<String>,
    /// Dissimilar spans on sentence 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans2: Option<Vec<TokenSpan>>,
    /// Dissimilar spans on sentence 1, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans1: Option<Vec<TokenSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnnotationRecord {
    pub fn failed(line: usize, error: impl std::fmt::Display) -> Self {
        Self {
            line,
            method: None,
            sentence1: None,
            sentence2: None,
            spans2: None,
            spans1: None,
            error: Some(error.to_string()),
        }
    }
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Replaces control characters so user text cannot inject terminal escapes.
pub fn escape_ansi(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_control() && c != '\t' { '\u{fffd}' } else { c })
        .collect()
}

fn check(text: &str, spans: &[TokenSpan]) -> Result<()> {
    let n = token_offsets(text).len();
    let mut prev_end = 0;
    for s in spans {
        if s.is_empty() || s.end > n || s.start < prev_end {
            bail!("span {s} does not fit a sentence of {n} tokens");
        }
        prev_end = s.end;
    }
    Ok(())
}

/// `text` with each span wrapped in `open`/`close`; text pieces go through
/// `escape`.
pub fn highlight(
    text: &str,
    spans: &[TokenSpan],
    open: &str,
    close: &str,
    escape: impl Fn(&str) -> String,
) -> Result<String> {
    check(text, spans)?;
    let mut out = String::with_capacity(text.len() + spans.len() * (open.len() + close.len()));
    let mut at = 0;
    for r in regions_for_spans(text, spans) {
        out.push_str(&escape(&text[at..r.start]));
        out.push_str(open);
        out.push_str(&escape(&text[r.start..r.end]));
        out.push_str(close);
        at = r.end;
    }
    out.push_str(&escape(&text[at..]));
    Ok(out)
}

pub fn with_markers(text: &str, spans: &[TokenSpan]) -> Result<String> {
    highlight(text, spans, SPAN_OPEN, SPAN_CLOSE, str::to_owned)
}

const ANSI_ON: &str = "\x1b[1;31m";
const ANSI_OFF: &str = "\x1b[0m";

fn sides(r: &AnnotationRecord) -> [(Option<&String>, Option<&Vec<TokenSpan>>); 2] {
    [
        (r.sentence1.as_ref(), r.spans1.as_ref()),
        (r.sentence2.as_ref(), r.spans2.as_ref()),
    ]
}

pub fn table_line(r: &AnnotationRecord) -> Result<String> {
    if let Some(e) = &r.error {
        return Ok(format!("{}\terror\t{}", r.line, e.replace(['\t', '\n'], " ")));
    }
    let mut cols = vec![r.line.to_string()];
    for (text, spans) in sides(r) {
        let text = text.map(String::as_str).unwrap_or_default();
        cols.push(with_markers(text, spans.map(Vec::as_slice).unwrap_or_default())?);
    }
    Ok(cols.join("\t"))
}

pub fn ansi_block(r: &AnnotationRecord) -> Result<String> {
    if let Some(e) = &r.error {
        return Ok(format!("line {}: error: {}\n", r.line, escape_ansi(e)));
    }
    let mut out = String::new();
    for (text, spans) in sides(r) {
        let text = text.map(String::as_str).unwrap_or_default();
        out.push_str(&highlight(text, spans.map(Vec::as_slice).unwrap_or_default(), ANSI_ON, ANSI_OFF, escape_ansi)?);
        out.push('\n');
    }
    Ok(out)
}

pub const HTML_HEAD: &str = "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Dissimilar spans</title>\n<style>\nbody { font-family: sans-serif; }\n.pair { margin-bottom: 1em; }\nmark.dissimilar { background: #f7b2b2; }\n.error { color: #a00; }\n</style>\n</head>\n<body>\n";
pub const HTML_TAIL: &str = "</body>\n</html>\n";

pub fn html_block(r: &AnnotationRecord) -> Result<String> {
    if let Some(e) = &r.error {
        return Ok(format!("<p class=\"error\">line {}: {}</p>\n", r.line, escape_html(e)));
    }
    let mut out = format!("<div class=\"pair\" data-line=\"{}\">\n", r.line);
    for (i, (text, spans)) in sides(r).into_iter().enumerate() {
        let text = text.map(String::as_str).unwrap_or_default();
        let body = highlight(
            text,
            spans.map(Vec::as_slice).unwrap_or_default(),
            "<mark class=\"dissimilar\">",
            "</mark>",
            escape_html,
        )?;
        out.push_str(&format!("<p class=\"s{}\">{body}</p>\n", i + 1));
    }
    out.push_str("</div>\n");
    Ok(out)
}
