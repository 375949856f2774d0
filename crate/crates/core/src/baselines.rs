//! Reference points without any model.

use crate::corpus::Sentence;
use crate::spans::{group_marked, SpanAnnotation, SpanLabel};
use std::collections::HashSet;

/// Never marks anything.
pub fn no_dsd(_s1: &Sentence, _s2: &Sentence) -> Vec<SpanAnnotation> {
    Vec::new()
}

/// Marks sentence-2 tokens whose exact surface form (case and attached
/// punctuation included) does not occur in sentence 1, grouped into runs.
pub fn naive_dsd(s1: &Sentence, s2: &Sentence) -> Vec<SpanAnnotation> {
    let seen: HashSet<&str> = s1.tokens.iter().map(String::as_str).collect();
    let absent: Vec<bool> = s2.tokens.iter().map(|t| !seen.contains(t.as_str())).collect();
    group_marked(&absent)
        .into_iter()
        .map(|span| SpanAnnotation {
            span,
            label: SpanLabel::Dissimilar,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_marks_new_tokens() {
        let s1 = Sentence::new("China stock index futures close higher -- Dec. 4");
        let s2 = Sentence::new("China stock index futures close lower -- Jan. 24");
        let spans = naive_dsd(&s1, &s2);
        let texts: Vec<String> = spans.iter().map(|s| s2.span_text(s.span)).collect();
        assert_eq!(texts, vec!["lower", "Jan. 24"]);
    }

    #[test]
    fn naive_edge_cases() {
        let s = Sentence::new("same words here");
        assert!(naive_dsd(&s, &s).is_empty());
        let other = Sentence::new("entirely new tokens now");
        assert_eq!(naive_dsd(&s, &other), vec![SpanAnnotation::dissimilar(0, 4)]);
        assert!(no_dsd(&s, &other).is_empty());
        // case-sensitive
        assert_eq!(
            naive_dsd(&Sentence::new("The cat"), &Sentence::new("the cat")),
            vec![SpanAnnotation::dissimilar(0, 1)]
        );
    }
}
