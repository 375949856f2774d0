//! Run settings, layered as flags > config file > environment > defaults.
//! API keys are never read from flags or files; see `api_key_env`.

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use dsd_core::embeddings::{ProviderConfig, ProviderKind};
use dsd_core::evaluation::{F1Mode, Protocol, ScoringOptions};
use dsd_core::explainers::{LimeConfig, ShapConfig, ShapMode};
use dsd_core::llm_dsd::LlmConfig;
use dsd_core::methods::MethodKind;
use dsd_core::thresholds;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Embedding,
    Lime,
    Shap,
    Llm,
    Naive,
    None,
}

impl From<MethodArg> for MethodKind {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Embedding => MethodKind::Embedding,
            MethodArg::Lime => MethodKind::Lime,
            MethodArg::Shap => MethodKind::Shap,
            MethodArg::Llm => MethodKind::Llm,
            MethodArg::Naive => MethodKind::Naive,
            MethodArg::None => MethodKind::NoDsd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderArg {
    /// OpenAI-compatible embeddings endpoint
    Http,
    /// Replay the cache in --cache-dir; misses are errors
    Cached,
    /// Seeded whole-text hash vectors (offline)
    Mock,
    /// Seeded bag-of-words vectors (offline)
    BowMock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Table,
    #[value(name = "json-lines", alias = "jsonl", alias = "jsonLines")]
    #[serde(alias = "jsonl", alias = "jsonLines")]
    JsonLines,
    Ansi,
    Html,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapModeArg {
    Auto,
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Arg {
    /// average of per-span F1
    MeanOfSpans,
    /// harmonic mean of averaged precision and recall
    HarmonicOfMeans,
}

/// Every setting is optional here so that sources can be merged.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Span detection method
    #[arg(long, global = true, value_enum)]
    pub method: Option<MethodArg>,
    /// Dissimilarity threshold (defaults to the published value for the model)
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Embedding backend
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderArg>,
    /// Endpoint of the method's backend (embeddings, or chat for --method llm)
    #[arg(long, global = true)]
    pub provider_endpoint: Option<String>,
    /// Model id sent to the backend
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Evaluation folds; 1 evaluates the whole set at once
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for the on-disk embedding cache
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Worker threads for per-pair processing
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Also annotate sentence 1 (annotate), or gate on both directions (paraphrase)
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub bidirectional: Option<bool>,
    /// Cap on replacement n-gram size
    #[arg(long, global = true)]
    pub max_ngram: Option<usize>,
    /// Extra attempts after a malformed chat response
    #[arg(long, global = true)]
    pub max_retries: Option<usize>,
    /// Request timeout in seconds
    #[arg(long, global = true)]
    pub timeout_secs: Option<f64>,
    /// Texts per embedding request
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Concurrent embedding requests
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// LIME masks per explanation
    #[arg(long, global = true)]
    pub lime_budget: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub shap_mode: Option<ShapModeArg>,
    /// Permutations for sampled Shapley values (default: twice the token count)
    #[arg(long, global = true)]
    pub shap_permutations: Option<usize>,
    /// Match span unigrams exactly instead of case- and punctuation-insensitively
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub exact_match: Option<bool>,
    #[arg(long, global = true, value_enum)]
    pub f1_mode: Option<F1Arg>,
}

macro_rules! layer {
    ($hi:expr, $lo:expr, $($f:ident),* $(,)?) => {
        Settings { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl Settings {
    /// Fields of `self` win; gaps are filled from `lower`.
    pub fn over(self, lower: Settings) -> Settings {
        layer!(
            self, lower, method, threshold, provider, provider_endpoint, model, folds, seed,
            cache_dir, format, workers, bidirectional, max_ngram, max_retries, timeout_secs,
            batch_size, max_in_flight, lime_budget, shap_mode, shap_permutations, exact_match,
            f1_mode,
        )
    }

    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `DSD_<SETTING>` variables, e.g. `DSD_PROVIDER_ENDPOINT`.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Settings> {
        fn parse<T: std::str::FromStr>(name: &str, v: Option<String>) -> Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            v.map(|v| v.parse::<T>().map_err(|e| anyhow::anyhow!("{name}={v:?}: {e}")))
                .transpose()
        }
        fn choice<T: ValueEnum>(name: &str, v: Option<String>) -> Result<Option<T>> {
            v.map(|v| T::from_str(&v, true).map_err(|e| anyhow::anyhow!("{name}={v:?}: {e}")))
                .transpose()
        }
        let var = |k: &str| (format!("DSD_{k}"), get(&format!("DSD_{k}")));
        macro_rules! num {
            ($k:literal) => {{
                let (n, v) = var($k);
                parse(&n, v)?
            }};
        }
        macro_rules! pick {
            ($k:literal) => {{
                let (n, v) = var($k);
                choice(&n, v)?
            }};
        }
        Ok(Settings {
            method: pick!("METHOD"),
            threshold: num!("THRESHOLD"),
            provider: pick!("PROVIDER"),
            provider_endpoint: var("PROVIDER_ENDPOINT").1,
            model: var("MODEL").1,
            folds: num!("FOLDS"),
            seed: num!("SEED"),
            cache_dir: var("CACHE_DIR").1.map(PathBuf::from),
            format: pick!("FORMAT"),
            workers: num!("WORKERS"),
            bidirectional: num!("BIDIRECTIONAL"),
            max_ngram: num!("MAX_NGRAM"),
            max_retries: num!("MAX_RETRIES"),
            timeout_secs: num!("TIMEOUT_SECS"),
            batch_size: num!("BATCH_SIZE"),
            max_in_flight: num!("MAX_IN_FLIGHT"),
            lime_budget: num!("LIME_BUDGET"),
            shap_mode: pick!("SHAP_MODE"),
            shap_permutations: num!("SHAP_PERMUTATIONS"),
            exact_match: num!("EXACT_MATCH"),
            f1_mode: pick!("F1_MODE"),
        })
    }
}

/// Environment variable read for the embeddings bearer token.
pub const EMBEDDING_KEY_ENV: &str = "DSD_EMBEDDING_API_KEY";
/// Environment variable read for the chat bearer token.
pub const LLM_KEY_ENV: &str = "DSD_LLM_API_KEY";

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: MethodKind,
    pub threshold: Option<f64>,
    pub provider: Option<ProviderArg>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub folds: usize,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub format: Format,
    pub workers: Option<usize>,
    /// Unset means: off for annotate, on for paraphrase.
    pub bidirectional: Option<bool>,
    pub max_ngram: Option<usize>,
    pub max_retries: usize,
    pub timeout_secs: f64,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub lime_budget: usize,
    pub shap_mode: ShapMode,
    pub shap_permutations: Option<usize>,
    pub exact_match: bool,
    pub f1_mode: F1Mode,
}

impl RunConfig {
    pub fn resolve(s: Settings) -> Result<RunConfig> {
        let method: MethodKind = s.method.unwrap_or(MethodArg::Embedding).into();
        if s.folds == Some(0) {
            bail!("--folds must be at least 1");
        }
        if s.workers == Some(0) {
            bail!("--workers must be at least 1");
        }
        if let Some(t) = s.threshold.filter(|t| t.is_nan()) {
            bail!("threshold {t} is not a number");
        }
        let provider = match (s.provider, &s.provider_endpoint) {
            (Some(p), _) => Some(p),
            (None, Some(_)) => Some(ProviderArg::Http),
            (None, None) => None,
        };
        Ok(RunConfig {
            method,
            threshold: s.threshold,
            provider,
            endpoint: s.provider_endpoint,
            model: s.model,
            folds: s.folds.unwrap_or(5),
            seed: s.seed.unwrap_or(0),
            cache_dir: s.cache_dir,
            format: s.format.unwrap_or(Format::Table),
            workers: s.workers,
            bidirectional: s.bidirectional,
            max_ngram: s.max_ngram,
            max_retries: s.max_retries.unwrap_or(3),
            timeout_secs: s.timeout_secs.unwrap_or(60.0),
            batch_size: s.batch_size.unwrap_or(64),
            max_in_flight: s.max_in_flight.unwrap_or(4),
            lime_budget: s.lime_budget.unwrap_or(LimeConfig::default().budget),
            shap_mode: match s.shap_mode.unwrap_or(ShapModeArg::Auto) {
                ShapModeArg::Auto => ShapMode::Auto,
                ShapModeArg::Exact => ShapMode::Exact,
                ShapModeArg::Sampled => ShapMode::Sampled,
            },
            shap_permutations: s.shap_permutations,
            exact_match: s.exact_match.unwrap_or(false),
            f1_mode: match s.f1_mode.unwrap_or(F1Arg::MeanOfSpans) {
                F1Arg::MeanOfSpans => F1Mode::MeanOfSpans,
                F1Arg::HarmonicOfMeans => F1Mode::HarmonicOfMeans,
            },
        })
    }

    pub fn model_id(&self) -> String {
        match (&self.model, self.provider) {
            (Some(m), _) => m.clone(),
            (None, Some(ProviderArg::BowMock)) => "bow-mock".into(),
            (None, _) => "mock".into(),
        }
    }

    pub fn provider_config(&self) -> Result<ProviderConfig> {
        let Some(kind) = self.provider else {
            bail!(
                "method {} needs embeddings: pass --provider-endpoint (or --provider mock|bow-mock|cached)",
                self.method
            );
        };
        let kind = match kind {
            ProviderArg::Http => ProviderKind::Http,
            ProviderArg::Cached => ProviderKind::CachedFile,
            ProviderArg::Mock => ProviderKind::DeterministicMock,
            ProviderArg::BowMock => ProviderKind::BagOfWordsMock,
        };
        Ok(ProviderConfig {
            kind,
            endpoint: self.endpoint.clone(),
            model_id: self.model_id(),
            max_batch_size: self.batch_size,
            max_in_flight: self.max_in_flight,
            timeout_secs: self.timeout_secs,
            api_key_env: Some(EMBEDDING_KEY_ENV.into()),
            cache_path: self.cache_dir.as_ref().map(|d| d.join("embeddings.jsonl")),
            mock_seed: self.seed,
            ..ProviderConfig::default()
        })
    }

    pub fn llm_config(&self) -> Result<LlmConfig> {
        let (Some(endpoint), Some(model)) = (&self.endpoint, &self.model) else {
            bail!("method llm needs --provider-endpoint and --model for the chat backend");
        };
        Ok(LlmConfig {
            endpoint: endpoint.clone(),
            model_id: model.clone(),
            temperature: 0.0,
            max_retries: self.max_retries,
            timeout_secs: self.timeout_secs,
            api_key_env: Some(LLM_KEY_ENV.into()),
        })
    }

    /// The configured threshold, else the published one for this model.
    pub fn effective_threshold(&self) -> f64 {
        if let Some(t) = self.threshold {
            return t;
        }
        let model = self.model_id();
        let d = thresholds::default_threshold(self.method, &model);
        if !d.swept {
            log::warn!(
                "no published {} threshold for model {model:?}; using unswept default {} (run `dsd sweep`)",
                self.method,
                d.value
            );
        }
        d.value
    }

    pub fn lime(&self) -> LimeConfig {
        LimeConfig {
            budget: self.lime_budget,
            ..LimeConfig::default()
        }
    }

    pub fn shap(&self) -> ShapConfig {
        ShapConfig {
            mode: self.shap_mode,
            permutations: self.shap_permutations,
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            folds: self.folds,
            seed: self.seed,
            scoring: ScoringOptions {
                normalize_tokens: !self.exact_match,
                f1_mode: self.f1_mode,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let flags = Settings {
            threshold: Some(0.1),
            ..Settings::default()
        };
        let file = Settings {
            threshold: Some(0.2),
            folds: Some(3),
            ..Settings::default()
        };
        let env = Settings::from_env(|k| match k {
            "DSD_FOLDS" => Some("7".into()),
            "DSD_SEED" => Some("9".into()),
            "DSD_METHOD" => Some("naive".into()),
            _ => None,
        })
        .unwrap();
        let s = flags.over(file).over(env);
        assert_eq!(s.threshold, Some(0.1));
        assert_eq!(s.folds, Some(3));
        assert_eq!(s.seed, Some(9));
        assert_eq!(s.method, Some(MethodArg::Naive));
    }

    #[test]
    fn bad_env_values_are_reported() {
        let err = Settings::from_env(|k| (k == "DSD_FOLDS").then(|| "many".into())).unwrap_err();
        assert!(err.to_string().contains("DSD_FOLDS"));
    }

    #[test]
    fn file_keys_are_kebab_case() {
        let s: Settings = toml::from_str("method = \"lime\"\nprovider-endpoint = \"http://x\"\nformat = \"json-lines\"").unwrap();
        assert_eq!(s.method, Some(MethodArg::Lime));
        assert_eq!(s.format, Some(Format::JsonLines));
        assert!(toml::from_str::<Settings>("api-key = \"secret\"").is_err());
    }
}
