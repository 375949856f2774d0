//! Offline backends for tests and dry runs.

use super::{EmbeddingBackend, EmbeddingError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const MOCK_DIMENSION: usize = 16;

/// Deterministic pseudo-random unit vector for `(seed, domain, text)`.
pub fn hashed_unit_vector(text: &str, dimension: usize, seed: u64, domain: &str) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    loop {
        let v: Vec<f64> = (0..dimension).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Whole-text hash embedding: unrelated strings get unrelated unit vectors.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            dimension: dimension.max(1),
            seed,
        }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(MOCK_DIMENSION, 0)
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts
            .iter()
            .map(|t| hashed_unit_vector(t, self.dimension, self.seed, "text"))
            .collect())
    }

    fn accepts_empty_input(&self) -> bool {
        true
    }
}

/// Normalized sum of per-token hash vectors. Word order is ignored and shared
/// words raise similarity, which gives perturbation methods a smooth,
/// interpretable signal. Text without tokens maps to a fixed vector.
#[derive(Debug, Clone, Copy)]
pub struct BagOfWordsEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl BagOfWordsEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            dimension: dimension.max(1),
            seed,
        }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut sum = vec![0.0; self.dimension];
        // sorted so the floating-point sum is independent of word order
        let mut tokens: Vec<&str> = text.split_whitespace().collect();
        tokens.sort_unstable();
        let any = !tokens.is_empty();
        for token in tokens {
            for (s, x) in sum
                .iter_mut()
                .zip(hashed_unit_vector(token, self.dimension, self.seed, "token"))
            {
                *s += x;
            }
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !any || norm < 1e-12 {
            return hashed_unit_vector("", self.dimension, self.seed, "empty");
        }
        sum.into_iter().map(|x| x / norm).collect()
    }
}

impl Default for BagOfWordsEmbedder {
    fn default() -> Self {
        Self::new(MOCK_DIMENSION, 0)
    }
}

impl EmbeddingBackend for BagOfWordsEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }

    fn accepts_empty_input(&self) -> bool {
        true
    }
}

/// Backend defined by a closure, for planting exact vectors in tests.
pub struct FnEmbedder<F> {
    f: F,
    accepts_empty: bool,
}

impl<F> FnEmbedder<F>
where
    F: Fn(&str) -> Vec<f64> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            accepts_empty: true,
        }
    }

    pub fn rejecting_empty(mut self) -> Self {
        self.accepts_empty = false;
        self
    }
}

impl<F> EmbeddingBackend for FnEmbedder<F>
where
    F: Fn(&str) -> Vec<f64> + Send + Sync,
{
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts.iter().map(|t| (self.f)(t)).collect())
    }

    fn accepts_empty_input(&self) -> bool {
        self.accepts_empty
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::cosine;

    #[test]
    fn bag_of_words_ignores_order_and_rewards_overlap() {
        let bow = BagOfWordsEmbedder::default();
        assert_eq!(bow.vector("a b c"), bow.vector("c  a b"));
        let base = bow.vector("the bird flies");
        let near = cosine(&base, &bow.vector("the bird runs")).unwrap();
        let far = cosine(&base, &bow.vector("a car runs")).unwrap();
        assert!(near > far);
        assert_eq!(bow.vector(""), bow.vector("   "));
    }

    #[test]
    fn seeds_change_vectors() {
        let a = HashEmbedder::new(16, 1).embed(&["x".into()]).unwrap();
        let b = HashEmbedder::new(16, 2).embed(&["x".into()]).unwrap();
        assert_ne!(a, b);
    }
}
