//! Perturbation explainers over the dissimilarity function
//! `f(mask) = 1 - cos(s1, s2 with dropped tokens)`.
//!
//! LIME fits a kernel-weighted ridge surrogate on random keep/drop masks.
//! Shapley values are computed exactly by subset enumeration for short
//! sentences, or estimated from antithetic permutation samples.
//!
//! Dropped tokens are deleted and the remainder re-joined with single spaces.

use crate::corpus::Sentence;
use crate::embeddings::{cosine_similarity, EmbeddingError, Provider};
use crate::spans::SpanAnnotation;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Largest sentence for exact Shapley enumeration (2^12 coalitions).
pub const MAX_EXACT_TOKENS: usize = 12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("sentence {0} has no tokens")]
    EmptySentence(u8),
    #[error("budget {budget} is below the token count {tokens}")]
    Budget { budget: usize, tokens: usize },
    #[error("exact Shapley values need at most {MAX_EXACT_TOKENS} tokens, got {0}")]
    TooManyTokens(usize),
    #[error("all sampled masks are identical; the surrogate is not identifiable")]
    DegenerateDesign,
    #[error("invalid explainer setting: {0}")]
    Config(String),
    #[error("game returned {got} values for {expected} coalitions")]
    GameArity { expected: usize, got: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AttributionMethod {
    Lime,
    ShapSampled,
    ShapExact,
    /// Aggregated n-gram replacement gains.
    Gain,
}

/// One weight per sentence-2 token; positive means the token pushes the
/// pair apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenAttribution {
    pub weights: Vec<f64>,
    pub method: AttributionMethod,
    pub sample_budget: usize,
    pub seed: u64,
}

impl TokenAttribution {
    pub fn spans(&self, threshold: f64) -> Vec<SpanAnnotation> {
        weights_to_spans(self, threshold)
    }
}

/// Tokens with weight strictly above `threshold`, grouped into maximal runs.
pub fn weights_to_spans(attr: &TokenAttribution, threshold: f64) -> Vec<SpanAnnotation> {
    crate::spans::weights_to_spans(&attr.weights, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSample {
    /// `true` = token kept.
    pub mask: Vec<bool>,
    pub value: f64,
}

/// Sentence 2 with only the kept tokens, single-space joined.
pub fn apply_mask<S: AsRef<str>>(tokens: &[S], mask: &[bool]) -> String {
    tokens
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(t, _)| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Dissimilarity of `s1` to each masked version of `s2`, in one provider
/// batch. Fully masked sentences go through the provider's empty-input rule.
pub fn masked_dissimilarity(
    s1: &Sentence,
    s2: &Sentence,
    masks: &[Vec<bool>],
    provider: &Provider,
) -> Result<Vec<f64>, ExplainError> {
    let anchor = provider.embed_one(&s1.normalized())?;
    let texts: Vec<String> = masks.iter().map(|m| apply_mask(&s2.tokens, m)).collect();
    let vectors = provider.embed_perturbations(&texts)?;
    vectors
        .iter()
        .map(|v| Ok(1.0 - cosine_similarity(&anchor, v)?))
        .collect()
}

fn check_pair(s1: &Sentence, s2: &Sentence) -> Result<(), ExplainError> {
    if s1.is_empty() {
        return Err(ExplainError::EmptySentence(1));
    }
    if s2.is_empty() {
        return Err(ExplainError::EmptySentence(2));
    }
    Ok(())
}

/// Evaluates a game on a batch of coalitions, checking arity.
fn evaluate<G>(game: &G, masks: &[Vec<bool>]) -> Result<Vec<f64>, ExplainError>
where
    G: Fn(&[Vec<bool>]) -> Result<Vec<f64>, ExplainError>,
{
    let values = game(masks)?;
    if values.len() != masks.len() {
        return Err(ExplainError::GameArity {
            expected: masks.len(),
            got: values.len(),
        });
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    /// Number of masks, including the unperturbed one.
    pub budget: usize,
    pub drop_probability: f64,
    pub kernel_width: f64,
    pub ridge: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            budget: 1000,
            drop_probability: 0.5,
            kernel_width: 25.0,
            ridge: 1e-3,
        }
    }
}

impl LimeConfig {
    fn validate(&self, tokens: usize) -> Result<(), ExplainError> {
        if self.budget < tokens {
            return Err(ExplainError::Budget {
                budget: self.budget,
                tokens,
            });
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(ExplainError::Config("drop probability outside [0, 1]".into()));
        }
        if !(self.kernel_width > 0.0) || !(self.ridge >= 0.0) {
            return Err(ExplainError::Config(
                "kernel width must be positive and ridge non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Masks for LIME: the all-kept mask first, then independent drops.
pub fn lime_masks(tokens: usize, cfg: &LimeConfig, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(cfg.budget.max(1));
    masks.push(vec![true; tokens]);
    while masks.len() < cfg.budget {
        masks.push(
            (0..tokens)
                .map(|_| !rng.random_bool(cfg.drop_probability))
                .collect(),
        );
    }
    masks
}

/// `exp(-d^2 / width^2)`, with `d` the cosine distance between the mask and
/// the all-kept mask (1 for the empty mask).
pub fn lime_kernel(mask: &[bool], width: f64) -> f64 {
    let kept = mask.iter().filter(|&&k| k).count();
    let d = if kept == 0 {
        1.0
    } else {
        1.0 - (kept as f64 / mask.len() as f64).sqrt()
    };
    (-(d * d) / (width * width)).exp()
}

/// Weighted ridge fit with an unpenalized intercept; returns the slopes.
pub fn weighted_ridge(
    masks: &[Vec<bool>],
    values: &[f64],
    weights: &[f64],
    ridge: f64,
) -> Result<Vec<f64>, ExplainError> {
    let p = masks.first().map_or(0, Vec::len);
    if masks.iter().all(|m| *m == masks[0]) {
        return Err(ExplainError::DegenerateDesign);
    }
    let total: f64 = weights.iter().sum();
    let mut x_mean = vec![0.0; p];
    let mut y_mean = 0.0;
    for ((m, &y), &w) in masks.iter().zip(values).zip(weights) {
        for (j, &k) in m.iter().enumerate() {
            if k {
                x_mean[j] += w;
            }
        }
        y_mean += w * y;
    }
    x_mean.iter_mut().for_each(|x| *x /= total);
    y_mean /= total;

    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for ((m, &y), &w) in masks.iter().zip(values).zip(weights) {
        for j in 0..p {
            row[j] = f64::from(u8::from(m[j])) - x_mean[j];
        }
        let yc = y - y_mean;
        for a in 0..p {
            rhs[a] += w * row[a] * yc;
            for b in a..p {
                gram[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
        gram[(a, a)] += ridge;
    }
    let beta = gram
        .lu()
        .solve(&rhs)
        .ok_or(ExplainError::DegenerateDesign)?;
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(ExplainError::DegenerateDesign);
    }
    Ok(beta.iter().copied().collect())
}

/// LIME weights for an arbitrary game over `tokens` features.
pub fn lime_game<G>(
    tokens: usize,
    game: G,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<TokenAttribution, ExplainError>
where
    G: Fn(&[Vec<bool>]) -> Result<Vec<f64>, ExplainError>,
{
    cfg.validate(tokens)?;
    let masks = lime_masks(tokens, cfg, seed);
    let values = evaluate(&game, &masks)?;
    let kernel: Vec<f64> = masks
        .iter()
        .map(|m| lime_kernel(m, cfg.kernel_width))
        .collect();
    let beta = weighted_ridge(&masks, &values, &kernel, cfg.ridge)?;
    Ok(TokenAttribution {
        weights: beta.into_iter().map(|b| -b).collect(),
        method: AttributionMethod::Lime,
        sample_budget: cfg.budget,
        seed,
    })
}

/// LIME weights for the tokens of `s2`. A positive weight means keeping the
/// token lowers the similarity to `s1`.
pub fn lime_token_weights(
    s1: &Sentence,
    s2: &Sentence,
    provider: &Provider,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<TokenAttribution, ExplainError> {
    check_pair(s1, s2)?;
    // the surrogate explains similarity; negated slopes then rank tokens
    // whose presence pushes the pair apart
    lime_game(
        s2.len(),
        |masks| Ok(masked_dissimilarity(s1, s2, masks, provider)?.into_iter().map(|d| 1.0 - d).collect()),
        cfg,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ShapMode {
    Exact,
    Sampled,
    /// Exact up to [`MAX_EXACT_TOKENS`], sampled beyond.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapConfig {
    pub mode: ShapMode,
    /// Permutations for the sampled mode; `None` means twice the token count.
    pub permutations: Option<usize>,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            mode: ShapMode::Auto,
            permutations: None,
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn subset_mask(bits: usize, n: usize) -> Vec<bool> {
    (0..n).map(|j| bits >> j & 1 == 1).collect()
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn exact_shapley<G>(n: usize, game: G) -> Result<Vec<f64>, ExplainError>
where
    G: Fn(&[Vec<bool>]) -> Result<Vec<f64>, ExplainError>,
{
    if n > MAX_EXACT_TOKENS {
        return Err(ExplainError::TooManyTokens(n));
    }
    let masks: Vec<Vec<bool>> = (0..1usize << n).map(|b| subset_mask(b, n)).collect();
    let v = evaluate(&game, &masks)?;
    // weight for a coalition of size s not containing i: s!(n-s-1)!/n!
    let weight: Vec<f64> = (0..n).map(|s| 1.0 / (n as f64 * binomial(n - 1, s))).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        for bits in 0..1usize << n {
            if bits >> i & 1 == 0 {
                let s = bits.count_ones() as usize;
                *p += weight[s] * (v[bits | 1 << i] - v[bits]);
            }
        }
    }
    Ok(phi)
}

/// Permutation-sampling Shapley estimate. Permutations come in antithetic
/// pairs (a random order and its reverse); an odd budget ends with an
/// unpaired order.
pub fn sampled_shapley<G>(
    n: usize,
    game: G,
    permutations: usize,
    seed: u64,
) -> Result<Vec<f64>, ExplainError>
where
    G: Fn(&[Vec<bool>]) -> Result<Vec<f64>, ExplainError>,
{
    if permutations == 0 {
        return Err(ExplainError::Config("at least one permutation is needed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(permutations);
    while orders.len() < permutations {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let reversed: Vec<usize> = order.iter().rev().copied().collect();
        orders.push(order);
        if orders.len() < permutations {
            orders.push(reversed);
        }
    }

    // every prefix coalition, deduplicated for a single batch
    let mut index: HashMap<Vec<bool>, usize> = HashMap::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    let mut chains: Vec<Vec<usize>> = Vec::with_capacity(orders.len());
    for order in &orders {
        let mut mask = vec![false; n];
        let mut chain = Vec::with_capacity(n + 1);
        for step in 0..=n {
            if step > 0 {
                mask[order[step - 1]] = true;
            }
            let id = *index.entry(mask.clone()).or_insert_with(|| {
                masks.push(mask.clone());
                masks.len() - 1
            });
            chain.push(id);
        }
        chains.push(chain);
    }
    let v = evaluate(&game, &masks)?;

    let mut phi = vec![0.0; n];
    for (order, chain) in orders.iter().zip(&chains) {
        for (step, &token) in order.iter().enumerate() {
            phi[token] += v[chain[step + 1]] - v[chain[step]];
        }
    }
    let m = orders.len() as f64;
    phi.iter_mut().for_each(|p| *p /= m);
    Ok(phi)
}

/// Shapley attribution for an arbitrary game.
pub fn shap_game<G>(
    tokens: usize,
    game: G,
    cfg: &ShapConfig,
    seed: u64,
) -> Result<TokenAttribution, ExplainError>
where
    G: Fn(&[Vec<bool>]) -> Result<Vec<f64>, ExplainError>,
{
    let exact = match cfg.mode {
        ShapMode::Exact => true,
        ShapMode::Sampled => false,
        ShapMode::Auto => tokens <= MAX_EXACT_TOKENS,
    };
    if exact {
        let weights = exact_shapley(tokens, game)?;
        return Ok(TokenAttribution {
            weights,
            method: AttributionMethod::ShapExact,
            sample_budget: 1 << tokens,
            seed,
        });
    }
    let budget = cfg.permutations.unwrap_or(2 * tokens);
    Ok(TokenAttribution {
        weights: sampled_shapley(tokens, game, budget, seed)?,
        method: AttributionMethod::ShapSampled,
        sample_budget: budget,
        seed,
    })
}

/// Shapley values of `v(S) = dissimilarity(s1, s2 restricted to S)`.
pub fn shap_token_values(
    s1: &Sentence,
    s2: &Sentence,
    provider: &Provider,
    cfg: &ShapConfig,
    seed: u64,
) -> Result<TokenAttribution, ExplainError> {
    check_pair(s1, s2)?;
    shap_game(
        s2.len(),
        |masks| masked_dissimilarity(s1, s2, masks, provider),
        cfg,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn additive(coefs: Vec<f64>) -> impl Fn(&[Vec<bool>]) -> Result<Vec<f64>, ExplainError> {
        move |masks| {
            Ok(masks
                .iter()
                .map(|m| m.iter().zip(&coefs).filter(|(k, _)| **k).map(|(_, c)| c).sum())
                .collect())
        }
    }

    #[test]
    fn kernel_values() {
        assert_eq!(lime_kernel(&[true, true], 25.0), 1.0);
        assert_abs_diff_eq!(lime_kernel(&[false, false], 25.0), (-1.0f64 / 625.0).exp());
        let d = 1.0 - 0.5f64.sqrt();
        assert_abs_diff_eq!(lime_kernel(&[true, false], 25.0), (-d * d / 625.0).exp());
    }

    #[test]
    fn masks_start_unperturbed_and_are_seeded() {
        let cfg = LimeConfig { budget: 20, ..LimeConfig::default() };
        let a = lime_masks(5, &cfg, 3);
        assert_eq!(a.len(), 20);
        assert_eq!(a[0], vec![true; 5]);
        assert_eq!(a, lime_masks(5, &cfg, 3));
        assert_ne!(a, lime_masks(5, &cfg, 4));
    }

    #[test]
    fn identical_masks_are_degenerate() {
        let masks = vec![vec![true, false]; 4];
        assert_eq!(
            weighted_ridge(&masks, &[1.0; 4], &[1.0; 4], 1e-3),
            Err(ExplainError::DegenerateDesign)
        );
    }

    #[test]
    fn unregularized_ridge_recovers_additive_game() {
        let cfg = LimeConfig { budget: 200, ridge: 0.0, ..LimeConfig::default() };
        let attr = lime_game(4, additive(vec![0.1, -0.3, 0.0, 0.25]), &cfg, 1).unwrap();
        for (w, c) in attr.weights.iter().zip([0.1, -0.3, 0.0, 0.25]) {
            assert_abs_diff_eq!(*w, -c, epsilon = 1e-9);
        }
    }

    #[test]
    fn exact_shapley_of_additive_game_is_its_coefficients() {
        let phi = exact_shapley(5, additive(vec![0.5, -1.0, 0.0, 2.0, 0.25])).unwrap();
        for (p, c) in phi.iter().zip([0.5, -1.0, 0.0, 2.0, 0.25]) {
            assert_abs_diff_eq!(*p, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_limit() {
        assert_eq!(
            exact_shapley(13, additive(vec![0.0; 13])),
            Err(ExplainError::TooManyTokens(13))
        );
    }

    #[test]
    fn sampled_efficiency_is_exact() {
        // every permutation telescopes from v(empty) to v(full)
        let game = |masks: &[Vec<bool>]| -> Result<Vec<f64>, ExplainError> {
            Ok(masks
                .iter()
                .map(|m| {
                    let k = m.iter().filter(|&&x| x).count() as f64;
                    (k * 1.3).sin() + if m[0] && m[2] { 0.7 } else { 0.0 }
                })
                .collect())
        };
        let phi = sampled_shapley(5, game, 7, 11).unwrap();
        let full = game(&[vec![true; 5]]).unwrap()[0];
        let empty = game(&[vec![false; 5]]).unwrap()[0];
        assert_abs_diff_eq!(phi.iter().sum::<f64>(), full - empty, epsilon = 1e-12);
    }

    #[test]
    fn apply_mask_joins_kept_tokens() {
        assert_eq!(apply_mask(&["a", "b", "c"], &[true, false, true]), "a c");
        assert_eq!(apply_mask(&["a", "b"], &[false, false]), "");
    }
}
