//! Dissimilar span detection for sentence pairs.

pub mod baselines;
pub mod corpus;
pub mod downstream;
pub mod embed_dsd;
pub mod embeddings;
pub mod evaluation;
pub mod explainers;
pub mod llm_dsd;
pub mod methods;
pub mod spans;
pub mod thresholds;
