//! Published per-model thresholds. Other models need a sweep.

use crate::methods::MethodKind;

/// `(model name fragment, method, threshold)`.
const TABLE: &[(&str, MethodKind, f64)] = &[
    ("all-mpnet-base-v2", MethodKind::Embedding, 0.006),
    ("all-minilm-l6-v2", MethodKind::Embedding, 0.010),
    ("text-embedding-3-large", MethodKind::Embedding, 0.005),
    ("text-embedding-004", MethodKind::Embedding, 0.005),
    ("all-mpnet-base-v2", MethodKind::Lime, 0.001),
    ("all-minilm-l6-v2", MethodKind::Lime, 0.030),
    ("all-minilm-l6-v2", MethodKind::Shap, 0.010),
    ("all-mpnet-base-v2", MethodKind::Shap, 0.030),
];

/// `(model name fragment, similarity threshold, span threshold)` for the
/// paraphrase gate.
const PARAPHRASE: &[(&str, f64, f64)] = &[
    ("all-minilm-l6-v2", 0.65, 0.008),
    ("all-mpnet-base-v2", 0.63, 0.008),
];

/// Used when nothing is known about the model.
pub const FALLBACK: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefaultThreshold {
    pub value: f64,
    /// False when the value is the generic fallback.
    pub swept: bool,
}

fn matches(model_id: &str, fragment: &str) -> bool {
    model_id.to_ascii_lowercase().contains(fragment)
}

/// Threshold for `method` on `model_id` (matched case-insensitively by name
/// fragment, so hub prefixes like `sentence-transformers/` are fine).
pub fn default_threshold(method: MethodKind, model_id: &str) -> DefaultThreshold {
    TABLE
        .iter()
        .find(|(m, k, _)| *k == method && matches(model_id, m))
        .map_or(
            DefaultThreshold {
                value: FALLBACK,
                swept: false,
            },
            |&(_, _, value)| DefaultThreshold { value, swept: true },
        )
}

/// `(similarity, span)` thresholds for the paraphrase gate, if published.
pub fn paraphrase_thresholds(model_id: &str) -> Option<(f64, f64)> {
    PARAPHRASE
        .iter()
        .find(|(m, _, _)| matches(model_id, m))
        .map(|&(_, s, d)| (s, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        let t = default_threshold(MethodKind::Embedding, "sentence-transformers/all-mpnet-base-v2");
        assert_eq!(t, DefaultThreshold { value: 0.006, swept: true });
        assert_eq!(default_threshold(MethodKind::Shap, "all-MiniLM-L6-v2").value, 0.010);
        assert!(!default_threshold(MethodKind::Embedding, "mystery").swept);
        assert_eq!(paraphrase_thresholds("all-mpnet-base-v2"), Some((0.63, 0.008)));
        assert_eq!(paraphrase_thresholds("x"), None);
    }
}
