//! Wire-format tests against an in-process fake of the embeddings and chat
//! endpoints.

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use dsd_core::corpus::{Dataset, Sentence};
use dsd_core::embed_dsd::token_gains;
use dsd_core::embeddings::mock::BagOfWordsEmbedder;
use dsd_core::embeddings::{EmbeddingError, Provider, ProviderConfig};
use dsd_core::evaluation::{sweep_threshold, Protocol};
use dsd_core::llm_dsd::{annotate_with_llm, HttpChatBackend, LlmConfig, LlmError};
use dsd_core::methods::EmbeddingDsd;
use dsd_core::spans::SpanAnnotation;
use serde_json::{json, Value};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Default)]
struct Shared {
    embed_requests: AtomicUsize,
    texts: AtomicUsize,
    max_batch: AtomicUsize,
    /// Requests to answer with 503 before behaving.
    unavailable: AtomicUsize,
    key: Option<String>,
    chat_script: Mutex<VecDeque<String>>,
    chat_log: Mutex<Vec<Value>>,
}

fn authorized(s: &Shared, headers: &HeaderMap) -> bool {
    match &s.key {
        None => true,
        Some(k) => headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == format!("Bearer {k}")),
    }
}

async fn embeddings(State(s): State<Arc<Shared>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    s.embed_requests.fetch_add(1, Ordering::SeqCst);
    if !authorized(&s, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    if s.unavailable
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
    {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    let input: Vec<String> = serde_json::from_value(body["input"].clone()).unwrap();
    s.texts.fetch_add(input.len(), Ordering::SeqCst);
    s.max_batch.fetch_max(input.len(), Ordering::SeqCst);
    let bow = BagOfWordsEmbedder::default();
    // reversed, so clients must honour `index`
    let data: Vec<Value> = input
        .iter()
        .enumerate()
        .rev()
        .map(|(i, t)| json!({"object": "embedding", "index": i, "embedding": bow.vector(t)}))
        .collect();
    Json(json!({"object": "list", "data": data, "model": body["model"]})).into_response()
}

async fn chat(State(s): State<Arc<Shared>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    if !authorized(&s, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    s.chat_log.lock().unwrap().push(body);
    let Some(reply) = s.chat_script.lock().unwrap().pop_front() else {
        return (StatusCode::INTERNAL_SERVER_ERROR, "script exhausted").into_response();
    };
    Json(json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": reply}}]})).into_response()
}

struct Fake {
    base: String,
    state: Arc<Shared>,
    _rt: tokio::runtime::Runtime,
}

impl Fake {
    fn start(state: Shared) -> Self {
        let state = Arc::new(state);
        let rt = tokio::runtime::Runtime::new().unwrap();
        let app = Router::new()
            .route("/v1/embeddings", post(embeddings))
            .route("/v1/chat/completions", post(chat))
            .with_state(state.clone());
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
        Self { base, state, _rt: rt }
    }

    fn embed_config(&self) -> ProviderConfig {
        ProviderConfig {
            api_key_env: None,
            ..ProviderConfig::http(format!("{}/v1/embeddings", self.base), "fake-model")
        }
    }

    fn requests(&self) -> usize {
        self.state.embed_requests.load(Ordering::SeqCst)
    }
}

fn root(e: &EmbeddingError) -> &EmbeddingError {
    match e {
        EmbeddingError::ForText { source, .. } => root(source),
        e => e,
    }
}

fn pair() -> (Sentence, Sentence) {
    (
        Sentence::new("the cat sat on a mat"),
        Sentence::new("the dog sat on a rug today"),
    )
}

#[test]
fn http_gains_match_the_in_process_embedder() {
    let fake = Fake::start(Shared::default());
    let cfg = ProviderConfig {
        max_batch_size: 7,
        max_in_flight: 3,
        ..fake.embed_config()
    };
    let remote = Provider::from_config(&cfg).unwrap();
    let local = Provider::bag_of_words_mock();
    let (a, b) = pair();
    let r = token_gains(&a, &b, None, &remote).unwrap();
    let l = token_gains(&a, &b, None, &local).unwrap();
    assert_eq!(r.aggregated, l.aggregated);
    assert_eq!(r.base_similarity, l.base_similarity);
    assert!(fake.state.max_batch.load(Ordering::SeqCst) <= 7);
    // deduplicated: no text is sent twice
    assert_eq!(fake.state.texts.load(Ordering::SeqCst), remote.texts_sent());
    assert_eq!(fake.requests(), remote.request_count());
}

#[test]
fn disk_cache_replays_without_requests() {
    let fake = Fake::start(Shared::default());
    let dir = tempfile::tempdir().unwrap();
    let cfg = ProviderConfig {
        cache_path: Some(dir.path().join("cache.jsonl")),
        ..fake.embed_config()
    };
    let (a, b) = pair();
    let first = token_gains(&a, &b, None, &Provider::from_config(&cfg).unwrap()).unwrap();
    let after_first = fake.requests();
    assert!(after_first > 0);

    let second = token_gains(&a, &b, None, &Provider::from_config(&cfg).unwrap()).unwrap();
    assert_eq!(fake.requests(), after_first);
    assert_eq!(first, second);

    // keys include the model, so another model does not see these entries
    let other = ProviderConfig {
        model_id: "another-model".into(),
        ..cfg.clone()
    };
    token_gains(&a, &b, None, &Provider::from_config(&other).unwrap()).unwrap();
    assert!(fake.requests() > after_first);

    // cache-only replay works offline for the same endpoint and model
    let replay = ProviderConfig {
        kind: dsd_core::embeddings::ProviderKind::CachedFile,
        ..cfg
    };
    let p = Provider::from_config(&replay).unwrap();
    assert_eq!(token_gains(&a, &b, None, &p).unwrap(), first);
    let err = p.embed_one("never seen before").unwrap_err();
    assert!(matches!(root(&err), EmbeddingError::CacheMiss { .. }), "{err}");
}

#[test]
fn sweep_costs_the_same_as_one_threshold() {
    let ds = Dataset::parse(
        "the {{cat}} sat\tthe {{dog}} sat\t0\t0\nit is red\tit is red\t\t1\na b c d\ta b x d\t\t1\n",
        "inline",
    )
    .unwrap();
    let protocol = Protocol {
        folds: 1,
        ..Protocol::default()
    };
    let run = |grid: &[f64]| {
        let fake = Fake::start(Shared::default());
        let provider = Provider::from_config(&fake.embed_config()).unwrap();
        let scorer = EmbeddingDsd {
            provider: &provider,
            max_ngram_size: None,
        };
        let rows = sweep_threshold(&ds, &scorer, grid, &protocol).unwrap();
        (rows.len(), fake.requests(), fake.state.texts.load(Ordering::SeqCst))
    };
    let one = run(&[0.01]);
    let many = run(&(0..40).map(|i| i as f64 * 0.005 - 0.05).collect::<Vec<_>>());
    assert_eq!(one.0, 1);
    assert_eq!(many.0, 40);
    assert_eq!(one.2, many.2);
    assert_eq!(one.1, many.1);
}

#[test]
fn transient_failures_are_retried() {
    let fake = Fake::start(Shared {
        unavailable: AtomicUsize::new(1),
        ..Shared::default()
    });
    let p = Provider::from_config(&fake.embed_config()).unwrap();
    p.embed_one("hello there").unwrap();
    assert_eq!(fake.requests(), 2);
}

#[test]
fn bearer_token_comes_from_the_environment() {
    let fake = Fake::start(Shared {
        key: Some("s3cret".into()),
        ..Shared::default()
    });
    let unauthenticated = Provider::from_config(&fake.embed_config()).unwrap();
    let err = unauthenticated.embed_one("hello").unwrap_err();
    assert!(matches!(root(&err), EmbeddingError::Auth(_)), "{err}");
    assert_eq!(fake.requests(), 1, "auth failures are not retried");

    std::env::set_var("DSD_TEST_FAKE_EMBED_KEY", "s3cret");
    let cfg = ProviderConfig {
        api_key_env: Some("DSD_TEST_FAKE_EMBED_KEY".into()),
        ..fake.embed_config()
    };
    Provider::from_config(&cfg).unwrap().embed_one("hello").unwrap();
}

fn llm_config(fake: &Fake) -> LlmConfig {
    LlmConfig {
        endpoint: format!("{}/v1/chat/completions", fake.base),
        model_id: "fake-chat".into(),
        api_key_env: None,
        ..LlmConfig::default()
    }
}

#[test]
fn chat_retry_sends_the_correction() {
    let fake = Fake::start(Shared {
        chat_script: Mutex::new(VecDeque::from([
            "I think the animals differ.".to_string(),
            "```\nThe {{dog}} sat.\n```".to_string(),
        ])),
        ..Shared::default()
    });
    let cfg = llm_config(&fake);
    let backend = HttpChatBackend::from_config(&cfg).unwrap();
    let out = annotate_with_llm(&Sentence::new("The cat sat."), &Sentence::new("The dog sat."), &backend, &cfg).unwrap();
    assert_eq!(out.spans, vec![SpanAnnotation::dissimilar(1, 2)]);
    assert_eq!(out.exchange.attempts, 2);

    let log = fake.state.chat_log.lock().unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log[0]["model"], "fake-chat");
    assert_eq!(log[0]["temperature"], 0.0);
    let roles: Vec<&str> = log[1]["messages"].as_array().unwrap().iter().map(|m| m["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["system", "user", "assistant", "user"]);
    assert_eq!(log[1]["messages"][2]["content"], "I think the animals differ.");
}

#[test]
fn chat_retries_are_bounded() {
    let fake = Fake::start(Shared {
        chat_script: Mutex::new(VecDeque::from(vec!["no block".to_string(); 5])),
        ..Shared::default()
    });
    let cfg = LlmConfig {
        max_retries: 2,
        ..llm_config(&fake)
    };
    let backend = HttpChatBackend::from_config(&cfg).unwrap();
    let err = annotate_with_llm(&Sentence::new("a b"), &Sentence::new("a c"), &backend, &cfg).unwrap_err();
    match err {
        LlmError::RetriesExhausted { exchange, .. } => assert_eq!(exchange.attempts, 3),
        e => panic!("unexpected {e}"),
    }
    assert_eq!(fake.state.chat_log.lock().unwrap().len(), 3);
}
