use dsd_core::corpus::Sentence;
use dsd_core::downstream::{
    accuracy_of, all_features, classify_sts, classify_sts_dsd, paraphrase_accuracy, tune_thresholds, GateMode,
    LabeledPair, PairFeatures, ParaphraseConfig, ParaphraseLabel,
};
use dsd_core::embeddings::mock::FnEmbedder;
use dsd_core::embeddings::Provider;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// `cat` texts sit at the planted cosine from everything else.
fn planted(cos: f64) -> Provider {
    Provider::new(
        "planted",
        "planted",
        FnEmbedder::new(move |t: &str| {
            if t.contains("cat") {
                vec![cos, (1.0 - cos * cos).sqrt()]
            } else {
                vec![1.0, 0.0]
            }
        }),
    )
}

fn cfg(sts: f64, dsd: f64) -> ParaphraseConfig {
    ParaphraseConfig {
        sts_threshold: sts,
        dsd_threshold: dsd,
        ..ParaphraseConfig::default()
    }
}

#[test]
fn similarity_boundary() {
    let a = Sentence::new("a dog runs");
    let b = Sentence::new("a cat runs");
    let p = planted(0.64);
    assert_eq!(classify_sts(&a, &b, &cfg(0.65, 0.0), &p).unwrap(), ParaphraseLabel::NotParaphrase);
    assert_eq!(classify_sts(&a, &b, &cfg(0.63, 0.0), &p).unwrap(), ParaphraseLabel::Paraphrase);
    // 1 and sqrt(3) make the cosine exactly 0.5, so the boundary is inclusive
    let half = Provider::new(
        "half",
        "half",
        FnEmbedder::new(|t: &str| if t.contains("cat") { vec![1.0, 3f64.sqrt()] } else { vec![1.0, 0.0] }),
    );
    assert_eq!(classify_sts(&a, &b, &cfg(0.5, 0.0), &half).unwrap(), ParaphraseLabel::Paraphrase);
    assert_eq!(classify_sts(&a, &a, &cfg(1.0, 0.0), &p).unwrap(), ParaphraseLabel::Paraphrase);
    assert_eq!(classify_sts(&a, &a, &cfg(1.01, 0.0), &p).unwrap(), ParaphraseLabel::NotParaphrase);
}

#[test]
fn gate_short_circuits_below_similarity() {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let p = Provider::new(
        "count",
        "count",
        FnEmbedder::new(move |t: &str| {
            counter.fetch_add(1, Ordering::SeqCst);
            if t.contains("cat") { vec![0.0, 1.0] } else { vec![1.0, 0.0] }
        }),
    );
    let a = Sentence::new("a dog runs far");
    let b = Sentence::new("a cat runs far");
    let label = classify_sts_dsd(&a, &b, &cfg(0.5, 0.0), &p).unwrap();
    assert_eq!(label, ParaphraseLabel::NotParaphrase);
    // only the two whole sentences were embedded
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn gate_rejects_detected_spans() {
    let bow = Provider::bag_of_words_mock();
    let a = Sentence::new("the old man walked his dog in the park");
    let b = Sentence::new("the old man walked his cat in the park");
    let sim = bow.similarity(&a.normalized(), &b.normalized()).unwrap();
    let sts = cfg(sim - 0.01, 0.0);
    assert_eq!(classify_sts(&a, &b, &sts, &bow).unwrap(), ParaphraseLabel::Paraphrase);
    assert_eq!(classify_sts_dsd(&a, &b, &sts, &bow).unwrap(), ParaphraseLabel::NotParaphrase);
    // identical sentences have no positive gain
    assert_eq!(classify_sts_dsd(&a, &a, &sts, &bow).unwrap(), ParaphraseLabel::Paraphrase);
}

fn f(similarity: f64, max_gain: f64) -> PairFeatures {
    PairFeatures { similarity, max_gain }
}

#[test]
fn two_by_two_grid_by_hand() {
    let features = [f(0.9, 0.001), f(0.9, 0.02), f(0.7, 0.0), f(0.6, 0.0)];
    let labels = [true, false, true, false];
    // cell accuracies worked out pair by pair
    let cells = [((0.65, 0.005), 1.0), ((0.65, 0.03), 0.75), ((0.8, 0.005), 0.75), ((0.8, 0.03), 0.5)];
    for ((s, d), acc) in cells {
        assert_eq!(accuracy_of(&features, &labels, s, d, GateMode::StsDsd).unwrap(), acc, "{s} {d}");
    }
    let best = tune_thresholds(&features, &labels, &[0.65, 0.8], &[0.005, 0.03], GateMode::StsDsd).unwrap();
    assert_eq!((best.sts_threshold, best.dsd_threshold, best.accuracy), (0.65, 0.005, 1.0));

    let separable = [f(0.9, 0.0), f(0.8, 0.0), f(0.3, 0.0), f(0.2, 0.0)];
    let best = tune_thresholds(&separable, &labels_sep(), &[0.1, 0.5, 0.85], &[0.0], GateMode::Sts).unwrap();
    assert_eq!((best.sts_threshold, best.accuracy), (0.5, 1.0));
}

fn labels_sep() -> [bool; 4] {
    [true, true, false, false]
}

#[test]
fn seven_of_ten() {
    let bow = Provider::bag_of_words_mock();
    let same = ["red apples grow here", "a b c", "we sing loudly", "time flies fast", "green hills roll"];
    let other = [
        ("one two three", "four five six"),
        ("alpha beta", "gamma delta"),
        ("sun moon", "rain snow"),
        ("left right", "up down"),
        ("cold tea", "warm milk"),
    ];
    let mut set = Vec::new();
    for (i, s) in same.iter().enumerate() {
        // four identical pairs labeled paraphrase, one mislabeled
        set.push(pair(i, s, s, i != 0));
    }
    for (i, (a, b)) in other.iter().enumerate() {
        // three dissimilar pairs labeled non-paraphrase, two mislabeled
        set.push(pair(10 + i, a, b, i < 2));
    }
    for (a, b) in other {
        assert!(bow.similarity(a, b).unwrap() < 0.9);
    }
    let acc = paraphrase_accuracy(&set, &cfg(0.9, 0.0), GateMode::Sts, &bow).unwrap();
    assert!((acc - 0.7).abs() < 1e-12, "{acc}");
}

fn pair(id: usize, a: &str, b: &str, paraphrase: bool) -> LabeledPair {
    LabeledPair {
        id: id.to_string(),
        sentence1: Sentence::new(a),
        sentence2: Sentence::new(b),
        paraphrase,
    }
}

#[test]
fn gated_paraphrases_are_a_subset() {
    let bow = Provider::bag_of_words_mock();
    let texts = [
        "the cat sat on the mat",
        "the dog sat on the mat",
        "a cat sat on a mat",
        "the cat lay on the rug",
        "the mat sat on the cat",
        "birds fly south in winter",
    ];
    let mut set = Vec::new();
    for (i, a) in texts.iter().enumerate() {
        for b in &texts[i..] {
            set.push(pair(set.len(), a, b, true));
        }
    }
    let features = all_features(&set, true, None, &bow).unwrap();
    for &(s, d) in &[(0.0, 0.0), (0.5, 0.01), (0.8, -0.01), (0.9, 0.05)] {
        for (p, feat) in set.iter().zip(&features) {
            let c = cfg(s, d);
            let gated = classify_sts_dsd(&p.sentence1, &p.sentence2, &c, &bow).unwrap();
            let plain = classify_sts(&p.sentence1, &p.sentence2, &c, &bow).unwrap();
            if gated == ParaphraseLabel::Paraphrase {
                assert_eq!(plain, ParaphraseLabel::Paraphrase);
            }
            // precomputed features agree with the direct classifier
            assert_eq!(feat.classify(s, d, GateMode::StsDsd), gated);
        }
    }
}
