//! Span annotation by prompting a chat model with a fixed four-example
//! prompt, then validating the marked-up hypothesis it returns.

use crate::corpus::{marked_spans, strip_markers, MarkerError, Sentence};
use crate::spans::{SpanAnnotation, SpanLabel};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Duration;

/// System prompt: task statement, two correct and two incorrect examples.
pub const SYSTEM_PROMPT: &str = r#"You are an NLP model able to detect differences in meaning in textual pairs. More concretely, given a premise and a hypothesis, you are able to compare them and annotate in the hypothesis the spans that are differing in meaning to the information included in the premise.

Here is an example of an input and the expected output:

# INPUT 1

```json
{
  "premise": "There was international outrage for the decision.",
  "hypothesis": "There was no reaction to the decision."
}
```

# OUTPUT 1

```
There was {{no reaction}} to the decision.
```

As you can see, the inputs are formatted as a JSON blob containing the premise and hypothesis. The response is a code block containing the  hypothesis with the differing spans enclosed within the markers "{{" and "}}". Note that without these markers, both the input hypothesis and the annotated hypothesis are identical.

Here is another example:

# INPUT 2

```json
{
  "premise": "Microorganisms are too small to be seen by the naked eye.",
  "hypothesis": "Microorganisms have considerable size and can be seen with your eyes."
}
```

# OUTPUT 2

```
Microorganisms {{have considerable size}} and {{can be seen with your eyes}}.
```

On the other hand, here goes an example with a incorrect output, since the annotated hypothesis includes words not present in the input hypothesis:

# INPUT 3

```json
{
  "premise": "It is much warmer here than it used to be.",
  "hypothesis": "It is way colder here than it used to be."
}
```

# (INCORRECT) OUTPUT 3

```
I believe it is {{way colder}} here than it used to be.
```

Let me show you one last example of an erroneous output, in this case because the annotation appears at the end and not within the hypothesis:

# INPUT 4

```json
{
  "premise": "The deputy was urged to provide an immediate apology for his controversial comments.",
  "hypothesis": "The deputy was urged to resign for his controversial comments."
}
```

# (INCORRECT) OUTPUT 4

```
The deputy was urged to resign for his controversial comments. {{resign}}
```"#;

const USER_PREFIX: &str = "You are now given the following JSON input:\n\n";
const USER_SUFFIX: &str = "\n\nPlease, provide the annotated hypothesis using the start marker \"{{\" and the end marker \"}}\". Enclose the annotated hypothesis within a code block using \"```\" so I can easily identify it. Please, reason your answer.";

/// Hex SHA-256 of the system prompt, for run provenance.
pub fn template_hash() -> String {
    hex::encode(Sha256::digest(SYSTEM_PROMPT.as_bytes()))
}

/// `(system prompt, user prompt)` for one pair. Both texts are JSON-escaped
/// inside the user prompt's blob.
pub fn build_prompt(premise: &str, hypothesis: &str) -> (String, String) {
    let quote = |s: &str| serde_json::to_string(s).expect("strings always serialize");
    let user = format!(
        "{USER_PREFIX}```json\n{{\n  \"premise\": {},\n  \"hypothesis\": {}\n}}\n```{USER_SUFFIX}",
        quote(premise),
        quote(hypothesis)
    );
    (SYSTEM_PROMPT.to_owned(), user)
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("no fenced code block in the response")]
    NoCodeBlock,
    #[error("bad span markers: {0}")]
    Markers(#[from] MarkerError),
    #[error("annotated text {annotated:?} does not match the hypothesis once markers are removed")]
    HypothesisMismatch { annotated: String },
    #[error("annotation {extra:?} was appended after the hypothesis instead of marking it in place")]
    AppendedAnnotation { extra: String },
}

/// Collapses whitespace runs to one space and trims.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Contents of the last complete ``` fenced block. A language tag on the
/// opening line is dropped.
pub fn last_code_block(raw: &str) -> Option<&str> {
    let fences: Vec<usize> = raw.match_indices("```").map(|(i, _)| i).collect();
    let pairs = fences.len() / 2;
    if pairs == 0 {
        return None;
    }
    let open = fences[2 * (pairs - 1)] + 3;
    let close = fences[2 * (pairs - 1) + 1];
    let body = &raw[open..close];
    match body.split_once('\n') {
        Some((tag, rest)) if !tag.is_empty() && tag.trim().chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') => {
            Some(rest)
        }
        Some(("", rest)) => Some(rest),
        _ => Some(body),
    }
}

/// Extracts, validates and converts a model response into spans on the
/// hypothesis tokens.
pub fn parse_llm_annotation(raw: &str, hypothesis: &str) -> Result<Vec<SpanAnnotation>, ParseError> {
    let block = last_code_block(raw).ok_or(ParseError::NoCodeBlock)?;
    let marked = strip_markers(block)?;
    let got = normalize_whitespace(&marked.text);
    let want = normalize_whitespace(hypothesis);
    if got != want {
        if let Some(extra) = got.strip_prefix(&want).filter(|e| e.starts_with(' ')) {
            return Err(ParseError::AppendedAnnotation {
                extra: extra.trim().to_owned(),
            });
        }
        return Err(ParseError::HypothesisMismatch {
            annotated: normalize_whitespace(block),
        });
    }
    Ok(marked_spans(&marked)?
        .into_iter()
        .map(|m| SpanAnnotation {
            span: m.span,
            label: SpanLabel::Dissimilar,
        })
        .collect())
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("chat request failed: {0}")]
    Transport(String),
    #[error("chat authentication failed: {0}")]
    Auth(String),
    #[error("chat endpoint returned an invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid chat configuration: {0}")]
    Config(String),
    #[error("no usable annotation after {} attempts: {last_error}", .exchange.attempts)]
    RetriesExhausted {
        exchange: Box<ChatExchange>,
        last_error: ParseError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Prompts and every raw response of one annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChatExchange {
    pub system_prompt: String,
    pub user_prompt: String,
    pub raw_responses: Vec<String>,
    pub attempts: usize,
}

impl ChatExchange {
    pub fn raw_response(&self) -> Option<&str> {
        self.raw_responses.last().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_retries: usize,
    pub timeout_secs: f64,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model_id: String::new(),
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 120.0,
            api_key_env: Some("DSD_LLM_API_KEY".into()),
        }
    }
}

/// A chat-completion endpoint: returns the assistant's reply to `messages`.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        (**self).complete(messages)
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// OpenAI-compatible chat-completions client.
pub struct HttpChatBackend {
    client: Client,
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn from_config(cfg: &LlmConfig) -> Result<Self, LlmError> {
        if cfg.endpoint.is_empty() {
            return Err(LlmError::Config("an endpoint is required".into()));
        }
        if cfg.model_id.is_empty() {
            return Err(LlmError::Config("a model id is required".into()));
        }
        if !(cfg.timeout_secs > 0.0) {
            return Err(LlmError::Config("timeout must be positive".into()));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model_id.clone(),
            temperature: cfg.temperature,
            api_key: cfg.api_key_env.as_ref().and_then(|v| std::env::var(v).ok()),
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let mut req = self.client.post(&self.endpoint).json(&ChatRequest {
            model: &self.model,
            messages,
            temperature: self.temperature,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(LlmError::Auth(status.to_string()));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(LlmError::Transport(format!("{status}: {body}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| LlmError::InvalidResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::InvalidResponse("no message content in first choice".into()))
    }
}

fn corrective_turn(err: &ParseError) -> String {
    format!(
        "Your answer could not be used: {err}. Reply again with a single code block \
         that contains the hypothesis exactly as given, with the differing spans \
         enclosed in \"{{{{\" and \"}}}}\"."
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmAnnotation {
    pub spans: Vec<SpanAnnotation>,
    pub exchange: ChatExchange,
}

/// Prompts until a response parses, up to `1 + cfg.max_retries` attempts.
/// Each failed attempt is followed by the model's reply and a corrective
/// user turn naming the problem.
pub fn annotate_with_llm(
    premise: &Sentence,
    hypothesis: &Sentence,
    backend: &dyn ChatBackend,
    cfg: &LlmConfig,
) -> Result<LlmAnnotation, LlmError> {
    let (system, user) = build_prompt(&premise.text, &hypothesis.text);
    let mut messages = vec![
        ChatMessage::new(Role::System, system.clone()),
        ChatMessage::new(Role::User, user.clone()),
    ];
    let mut exchange = ChatExchange {
        system_prompt: system,
        user_prompt: user,
        raw_responses: Vec::new(),
        attempts: 0,
    };
    loop {
        let raw = backend.complete(&messages)?;
        exchange.attempts += 1;
        exchange.raw_responses.push(raw.clone());
        match parse_llm_annotation(&raw, &hypothesis.text) {
            Ok(spans) => return Ok(LlmAnnotation { spans, exchange }),
            Err(e) if exchange.attempts > cfg.max_retries => {
                return Err(LlmError::RetriesExhausted {
                    exchange: Box::new(exchange),
                    last_error: e,
                })
            }
            Err(e) => {
                log::debug!("attempt {} unusable: {e}", exchange.attempts);
                messages.push(ChatMessage::new(Role::Assistant, raw));
                messages.push(ChatMessage::new(Role::User, corrective_turn(&e)));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spans::TokenSpan;
    use proptest::prelude::*;
    use std::sync::Mutex;

    #[test]
    fn prompt_blob_escapes_quotes() {
        let (_, user) = build_prompt("He said \"no\".", "It is fine.");
        assert!(user.contains("\"premise\": \"He said \\\"no\\\".\""));
        assert!(user.contains("\"hypothesis\": \"It is fine.\""));
        let blob = last_code_block(&user).unwrap();
        let v: serde_json::Value = serde_json::from_str(blob).unwrap();
        assert_eq!(v["premise"], "He said \"no\".");
    }

    #[test]
    fn template_is_fixed() {
        assert_eq!(template_hash(), template_hash());
        assert_eq!(build_prompt("a", "b").0, build_prompt("c", "d").0);
        assert_eq!(SYSTEM_PROMPT.matches("# INPUT").count(), 4);
    }

    #[test]
    fn system_examples_validate_as_labelled() {
        let h1 = "There was no reaction to the decision.";
        let spans = parse_llm_annotation("```\nThere was {{no reaction}} to the decision.\n```", h1).unwrap();
        assert_eq!(spans, vec![SpanAnnotation::dissimilar(2, 4)]);
        let h2 = "Microorganisms have considerable size and can be seen with your eyes.";
        let spans = parse_llm_annotation(
            "```\nMicroorganisms {{have considerable size}} and {{can be seen with your eyes}}.\n```",
            h2,
        )
        .unwrap();
        assert_eq!(
            spans.iter().map(|s| s.span).collect::<Vec<_>>(),
            vec![TokenSpan::new(1, 4), TokenSpan::new(5, 11)]
        );
        assert!(matches!(
            parse_llm_annotation(
                "```\nI believe it is {{way colder}} here than it used to be.\n```",
                "It is way colder here than it used to be."
            ),
            Err(ParseError::HypothesisMismatch { .. })
        ));
        assert_eq!(
            parse_llm_annotation(
                "```\nThe deputy was urged to resign for his controversial comments. {{resign}}\n```",
                "The deputy was urged to resign for his controversial comments."
            ),
            Err(ParseError::AppendedAnnotation { extra: "resign".into() })
        );
    }

    #[test]
    fn takes_last_block_and_drops_language_tag() {
        let raw = "Reasoning: ```\nnot this\n``` then\n```text\nA {{b}}  c\n```\n";
        assert_eq!(
            parse_llm_annotation(raw, "A b c").unwrap(),
            vec![SpanAnnotation::dissimilar(1, 2)]
        );
        assert_eq!(parse_llm_annotation("no fence", "x"), Err(ParseError::NoCodeBlock));
        assert!(parse_llm_annotation("```\nx {{y\n```", "x y").is_err());
        assert_eq!(parse_llm_annotation("```\nx y\n```", "x  y").unwrap(), vec![]);
    }

    proptest! {
        #[test]
        fn parser_total_on_arbitrary_input(raw in ".{0,200}", hyp in ".{0,40}") {
            let _ = parse_llm_annotation(&raw, &hyp);
        }

        #[test]
        fn accepted_annotations_reproduce_hypothesis(
            words in prop::collection::vec("[a-z]{1,5}", 1..8),
            marks in prop::collection::vec(any::<bool>(), 8),
        ) {
            let marked: Vec<String> = words
                .iter()
                .zip(&marks)
                .map(|(w, &m)| if m { format!("{{{{{w}}}}}") } else { w.clone() })
                .collect();
            let raw = format!("```\n{}\n```", marked.join(" "));
            let hyp = words.join(" ");
            if let Ok(spans) = parse_llm_annotation(&raw, &hyp) {
                let block = last_code_block(&raw).unwrap();
                prop_assert_eq!(normalize_whitespace(&strip_markers(block).unwrap().text), hyp);
                prop_assert_eq!(spans.len(), marks.iter().take(words.len()).filter(|&&m| m).count());
            }
        }
    }

    struct Scripted(Mutex<Vec<String>>);

    impl ChatBackend for Scripted {
        fn complete(&self, _: &[ChatMessage]) -> Result<String, LlmError> {
            let mut q = self.0.lock().unwrap();
            Ok(if q.len() > 1 { q.remove(0) } else { q[0].clone() })
        }
    }

    #[test]
    fn retry_arithmetic() {
        let p = Sentence::new("a b c");
        let h = Sentence::new("a x c");
        let cfg = LlmConfig { max_retries: 3, ..LlmConfig::default() };
        let ok = Scripted(Mutex::new(vec!["```\na {{x}} c\n```".into()]));
        let got = annotate_with_llm(&p, &h, &ok, &cfg).unwrap();
        assert_eq!(got.exchange.attempts, 1);
        let bad = Scripted(Mutex::new(vec!["nothing".into()]));
        match annotate_with_llm(&p, &h, &bad, &cfg) {
            Err(LlmError::RetriesExhausted { exchange, last_error }) => {
                assert_eq!(exchange.attempts, 4);
                assert_eq!(exchange.raw_responses.len(), 4);
                assert_eq!(last_error, ParseError::NoCodeBlock);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
