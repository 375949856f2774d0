use approx::assert_abs_diff_eq;
use dsd_core::corpus::Sentence;
use dsd_core::embeddings::mock::FnEmbedder;
use dsd_core::embeddings::{cosine_similarity, Provider};
use dsd_core::explainers::{
    exact_shapley, lime_token_weights, sampled_shapley, shap_token_values, weights_to_spans, ExplainError,
    LimeConfig, ShapConfig, ShapMode, TokenAttribution, AttributionMethod,
};
use dsd_core::spans::SpanAnnotation;

/// Similarity 0.6 to anything without `X`, 1.0 among texts alike.
fn planted() -> Provider {
    Provider::new(
        "planted",
        "planted",
        FnEmbedder::new(|t: &str| {
            if t.split_whitespace().any(|w| w == "X") {
                vec![0.6, 0.8]
            } else {
                vec![1.0, 0.0]
            }
        }),
    )
}

#[test]
fn single_token_lime_is_the_closed_form() {
    let p = Provider::bag_of_words_mock();
    let s1 = Sentence::new("the cat sat");
    let s2 = Sentence::new("dog");
    let cfg = LimeConfig {
        budget: 64,
        ridge: 0.0,
        ..LimeConfig::default()
    };
    let w = lime_token_weights(&s1, &s2, &p, &cfg, 5).unwrap().weights;
    let anchor = p.embed_one("the cat sat").unwrap();
    let v = p.embed_perturbations(&["dog", ""]).unwrap();
    let sim_full = cosine_similarity(&anchor, &v[0]).unwrap();
    let sim_empty = cosine_similarity(&anchor, &v[1]).unwrap();
    assert_eq!(w.len(), 1);
    assert_abs_diff_eq!(w[0], sim_empty - sim_full, epsilon = 1e-9);
}

#[test]
fn constant_function_gets_zero_weights() {
    let p = Provider::new("const", "const", FnEmbedder::new(|_: &str| vec![0.3, 0.4]));
    let s = Sentence::new("one two three four five");
    let w = lime_token_weights(&s, &s, &p, &LimeConfig::default(), 0).unwrap().weights;
    for x in w {
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-6);
    }
}

#[test]
fn planted_token_ranks_first() {
    let p = planted();
    let s1 = Sentence::new("a b c d e");
    let s2 = Sentence::new("a b c X e");
    let lime = lime_token_weights(&s1, &s2, &p, &LimeConfig::default(), 2).unwrap().weights;
    let top = (0..5).max_by(|&i, &j| lime[i].total_cmp(&lime[j])).unwrap();
    assert_eq!(top, 3);
    assert!(lime[3] > 0.3, "{lime:?}");

    let shap = shap_token_values(&s1, &s2, &p, &ShapConfig::default(), 0).unwrap();
    assert_eq!(shap.method, AttributionMethod::ShapExact);
    assert_abs_diff_eq!(shap.weights[3], 0.4, epsilon = 1e-9);
    for i in [0, 1, 2, 4] {
        assert_abs_diff_eq!(shap.weights[i], 0.0, epsilon = 1e-9);
    }
    assert_eq!(shap.spans(0.1), vec![SpanAnnotation::dissimilar(3, 4)]);
}

#[test]
fn lime_is_bitwise_deterministic() {
    let p = Provider::bag_of_words_mock();
    let s1 = Sentence::new("the quick brown fox jumps");
    let s2 = Sentence::new("a slow brown dog sleeps today");
    let cfg = LimeConfig::default();
    let a = lime_token_weights(&s1, &s2, &p, &cfg, 9).unwrap();
    let b = lime_token_weights(&s1, &s2, &Provider::bag_of_words_mock(), &cfg, 9).unwrap();
    assert_eq!(
        a.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
        b.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>()
    );
    let small = LimeConfig { budget: 3, ..cfg };
    assert!(matches!(
        lime_token_weights(&s1, &s2, &p, &small, 9),
        Err(ExplainError::Budget { .. })
    ));
}

fn bumpy(masks: &[Vec<bool>]) -> Result<Vec<f64>, ExplainError> {
    Ok(masks
        .iter()
        .map(|m| {
            let k = m.iter().filter(|&&x| x).count() as f64;
            let pair = if m[1] && m[4] { 0.6 } else { 0.0 };
            let lone = if m[0] && !m[5] { -0.3 } else { 0.0 };
            (0.7 * k).sin() + pair + lone + 0.1 * m[2] as u8 as f64
        })
        .collect())
}

#[test]
fn sampled_shapley_is_unbiased() {
    let exact = exact_shapley(6, bumpy).unwrap();
    // 200 permutations per run; at the 12-permutation default the spread
    // of a 50-run mean is about 0.01 on this game
    let runs = 50;
    let mut mean = [0.0; 6];
    for seed in 0..runs {
        let phi = sampled_shapley(6, bumpy, 200, seed).unwrap();
        for (m, p) in mean.iter_mut().zip(phi) {
            *m += p / runs as f64;
        }
    }
    for (m, e) in mean.iter().zip(&exact) {
        assert!((m - e).abs() < 0.01, "mean {m} exact {e}");
    }
}

#[test]
fn exact_mode_is_capped() {
    let p = Provider::bag_of_words_mock();
    let long = Sentence::new("a b c d e f g h i j k l m");
    let exact = ShapConfig {
        mode: ShapMode::Exact,
        permutations: None,
    };
    assert_eq!(
        shap_token_values(&long, &long, &p, &exact, 0).unwrap_err(),
        ExplainError::TooManyTokens(13)
    );
    let auto = shap_token_values(&long, &long, &p, &ShapConfig::default(), 0).unwrap();
    assert_eq!(auto.method, AttributionMethod::ShapSampled);
    assert_eq!(auto.sample_budget, 26);
}

#[test]
fn thresholding_attributions() {
    let attr = TokenAttribution {
        weights: vec![0.2, 0.3, 0.0, 0.4],
        method: AttributionMethod::Lime,
        sample_budget: 0,
        seed: 0,
    };
    assert_eq!(
        weights_to_spans(&attr, 0.1),
        vec![SpanAnnotation::dissimilar(0, 2), SpanAnnotation::dissimilar(3, 4)]
    );
    assert_eq!(weights_to_spans(&attr, 0.35), vec![SpanAnnotation::dissimilar(3, 4)]);
    assert!(weights_to_spans(&attr, 0.5).is_empty());
}

