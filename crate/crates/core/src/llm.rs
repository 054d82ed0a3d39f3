//! Completion backends (HTTP and deterministic mocks), a persistent response
//! cache, bounded retries, and answer parsing.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{derive_seed, sha256_hex};
use crate::survey::Question;

/// Metadata key carrying the gold letter for the oracle mock.
pub const META_GOLD_LABEL: &str = "gold_label";
/// Metadata key carrying the rendered choice count for the random mock.
pub const META_N_CHOICES: &str = "n_choices";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("authentication failure: {0}")]
    Auth(String),
    #[error("backend misconfigured: {0}")]
    Misconfigured(String),
    #[error("scripted backend has no response for this prompt")]
    ScriptMiss,
    #[error("completion cache io: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("completion cache line {line}: {message}")]
    CacheFormat { line: usize, message: String },
}

impl LlmError {
    /// Transport failures and rate limits are worth another attempt;
    /// auth and configuration problems are not.
    pub fn retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_) | LlmError::RateLimited(_))
    }
}

/// A single completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_output_tokens: usize,
    pub temperature: f64,
    pub backend_tag: String,
    /// Side-channel for mock backends (gold label, rendered choice count).
    /// Not part of the cache key.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, backend_tag: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_output_tokens: 16,
            temperature: 0.0,
            backend_tag: backend_tag.into(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Outcome of mapping a raw completion back onto a choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    LetterMatch,
    TextMatch,
    Ambiguous,
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub choice_index: Option<usize>,
    pub parse_status: ParseStatus,
    pub raw: String,
}

/// Maps a raw completion onto one of the question's choices.
///
/// Rule cascade: (1) if the first whitespace-delimited token is a single
/// uppercase letter, optionally followed by `.`, `)` or `:`, and that letter
/// is a valid label, it wins; (2) otherwise a case-insensitive substring
/// search over the choice texts must find exactly one distinct text.
pub fn parse_answer(raw: &str, question: &Question) -> ParsedAnswer {
    let trimmed = raw.trim();
    if let Some(token) = trimmed.split_whitespace().next() {
        if let Some(letter) = letter_token(token) {
            if let Some(choice) = question.choices.iter().find(|c| c.label == letter) {
                return ParsedAnswer {
                    choice_index: Some(choice.index),
                    parse_status: ParseStatus::LetterMatch,
                    raw: raw.to_string(),
                };
            }
        }
    }

    let haystack = raw.to_lowercase();
    let mut matches: Vec<(usize, String)> = Vec::new();
    for choice in &question.choices {
        let needle = choice.text.to_lowercase();
        if needle.is_empty() || !haystack.contains(&needle) {
            continue;
        }
        if !matches.iter().any(|(_, text)| *text == needle) {
            matches.push((choice.index, needle));
        }
    }
    match matches.len() {
        1 => ParsedAnswer {
            choice_index: Some(matches[0].0),
            parse_status: ParseStatus::TextMatch,
            raw: raw.to_string(),
        },
        0 => ParsedAnswer {
            choice_index: None,
            parse_status: ParseStatus::NoMatch,
            raw: raw.to_string(),
        },
        _ => ParsedAnswer {
            choice_index: None,
            parse_status: ParseStatus::Ambiguous,
            raw: raw.to_string(),
        },
    }
}

fn letter_token(token: &str) -> Option<char> {
    let mut chars = token.chars();
    let first = chars.next()?;
    if !first.is_ascii_uppercase() {
        return None;
    }
    match chars.next() {
        None => Some(first),
        Some(punct) if matches!(punct, '.' | ')' | ':') && chars.next().is_none() => Some(first),
        _ => None,
    }
}

/// A completion backend. `complete_once` performs one attempt; retries are
/// the client's job.
pub trait CompletionBackend: Send + Sync {
    fn tag(&self) -> &str;

    fn complete_once(&self, request: &CompletionRequest) -> Result<String, LlmError>;

    /// Whether the response is a pure function of the prompt. Backends that
    /// consult request metadata (the oracle mock) must return false so the
    /// prompt-keyed cache is bypassed.
    fn prompt_deterministic(&self) -> bool {
        true
    }
}

/// Mock backend with an exact prompt -> response map.
pub struct ScriptedBackend {
    responses: HashMap<String, String>,
    default: Option<String>,
}

pub const SCRIPTED_TAG: &str = "mock-scripted";

impl ScriptedBackend {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self {
            responses,
            default: None,
        }
    }

    /// Response returned for prompts missing from the map.
    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }
}

impl CompletionBackend for ScriptedBackend {
    fn tag(&self) -> &str {
        SCRIPTED_TAG
    }

    fn complete_once(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        self.responses
            .get(&request.prompt)
            .or(self.default.as_ref())
            .cloned()
            .ok_or(LlmError::ScriptMiss)
    }
}

/// Mock backend that answers with the gold label letter carried in the
/// request metadata.
pub struct OracleBackend;

pub const ORACLE_TAG: &str = "mock-oracle";

impl CompletionBackend for OracleBackend {
    fn tag(&self) -> &str {
        ORACLE_TAG
    }

    fn complete_once(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request
            .metadata
            .get(META_GOLD_LABEL)
            .cloned()
            .ok_or_else(|| LlmError::Misconfigured(format!("oracle backend needs {META_GOLD_LABEL} metadata")))
    }

    fn prompt_deterministic(&self) -> bool {
        false
    }
}

/// Seeded mock answering a uniformly random letter among the rendered
/// choices. The draw is a hash of (seed, prompt), so identical prompts get
/// identical answers and the cache stays transparent.
pub struct UniformRandomBackend {
    seed: u64,
}

pub const UNIFORM_RANDOM_TAG: &str = "mock-uniform-random";

impl UniformRandomBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl CompletionBackend for UniformRandomBackend {
    fn tag(&self) -> &str {
        UNIFORM_RANDOM_TAG
    }

    fn complete_once(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let n: usize = request
            .metadata
            .get(META_N_CHOICES)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| {
                LlmError::Misconfigured(format!("uniform-random backend needs {META_N_CHOICES} metadata"))
            })?;
        if n == 0 {
            return Err(LlmError::Misconfigured("n_choices is zero".into()));
        }
        let index = (derive_seed(self.seed, &["uniform-completion", &request.prompt]) % n as u64) as usize;
        Ok(crate::survey::label_for_index(index).to_string())
    }
}

/// HTTP completion backend configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

/// Backend speaking `{model, prompt, max_tokens, temperature} -> {text}`.
pub struct HttpBackend {
    config: HttpBackendConfig,
    token: String,
    client: reqwest::blocking::Client,
    tag: String,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

impl HttpBackend {
    /// Validates the endpoint and auth env var up front, before any call.
    pub fn new(config: HttpBackendConfig) -> Result<Self, LlmError> {
        let token = std::env::var(&config.auth_token_env)
            .map_err(|_| LlmError::Misconfigured(format!("auth env var {} is not set", config.auth_token_env)))?;
        reqwest::Url::parse(&config.endpoint)
            .map_err(|e| LlmError::Misconfigured(format!("bad endpoint {}: {e}", config.endpoint)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Misconfigured(e.to_string()))?;
        let tag = format!("http:{}", config.model);
        Ok(Self {
            config,
            token,
            client,
            tag,
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete_once(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let response = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.token)
            .json(&WireRequest {
                model: &self.config.model,
                prompt: &request.prompt,
                max_tokens: request.max_output_tokens,
                temperature: request.temperature,
            })
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        match status.as_u16() {
            200..=299 => {
                let parsed: WireResponse = response
                    .json()
                    .map_err(|e| LlmError::Transport(format!("bad response body: {e}")))?;
                Ok(parsed.text)
            }
            401 | 403 => Err(LlmError::Auth(format!("http {status}"))),
            429 => Err(LlmError::RateLimited(format!("http {status}"))),
            _ => Err(LlmError::Transport(format!("http {status}"))),
        }
    }
}

/// Persistent completion cache; one JSON record per line.
pub struct CompletionCache {
    path: Option<PathBuf>,
    state: Mutex<CompletionCacheState>,
}

struct CompletionCacheState {
    entries: HashMap<String, String>,
    writer: Option<std::fs::File>,
}

#[derive(Serialize, Deserialize)]
struct CompletionCacheRecord {
    key_hash: String,
    prompt_hash: String,
    response: String,
    timestamp: u64,
}

impl CompletionCache {
    pub fn ephemeral() -> Self {
        Self {
            path: None,
            state: Mutex::new(CompletionCacheState {
                entries: HashMap::new(),
                writer: None,
            }),
        }
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(std::fs::File::open(path)?);
            for (zero_line, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CompletionCacheRecord =
                    serde_json::from_str(&line).map_err(|e| LlmError::CacheFormat {
                        line: zero_line + 1,
                        message: e.to_string(),
                    })?;
                entries.insert(record.key_hash, record.response);
            }
        }
        let writer = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            state: Mutex::new(CompletionCacheState {
                entries,
                writer: Some(writer),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key_hash: &str) -> Option<String> {
        self.state.lock().unwrap().entries.get(key_hash).cloned()
    }

    fn put(&self, key_hash: &str, prompt_hash: &str, response: &str) -> Result<(), LlmError> {
        let mut state = self.state.lock().unwrap();
        if state.entries.contains_key(key_hash) {
            return Ok(());
        }
        state.entries.insert(key_hash.to_string(), response.to_string());
        if let Some(writer) = state.writer.as_mut() {
            let record = CompletionCacheRecord {
                key_hash: key_hash.to_string(),
                prompt_hash: prompt_hash.to_string(),
                response: response.to_string(),
                timestamp: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let mut line = serde_json::to_string(&record).expect("cache record serializes");
            line.push('\n');
            writer.write_all(line.as_bytes())?;
            writer.flush()?;
        }
        Ok(())
    }
}

/// Cache key: hash of (backend_tag, prompt, max_output_tokens, temperature).
/// Request metadata is deliberately excluded.
pub fn cache_key(request: &CompletionRequest) -> String {
    let encoded = format!(
        "{}\x1f{}\x1f{:016x}\x1f{}",
        request.backend_tag,
        request.max_output_tokens,
        request.temperature.to_bits(),
        request.prompt
    );
    sha256_hex(encoded.as_bytes())
}

/// Retry schedule for backend calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; for tests.
    pub fn immediate() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::ZERO,
        }
    }
}

/// Uniform completion interface: cache first, then the backend with bounded
/// retries and exponential backoff.
pub struct CompletionClient {
    backend: Box<dyn CompletionBackend>,
    cache: Option<CompletionCache>,
    retry: RetryPolicy,
    parallelism: usize,
    backend_calls: AtomicU64,
}

impl CompletionClient {
    pub fn new(backend: Box<dyn CompletionBackend>) -> Self {
        Self {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            parallelism: 4,
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: CompletionCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn backend_tag(&self) -> &str {
        self.backend.tag()
    }

    /// Number of backend invocations so far (each retry attempt counts).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Completes one request, consulting the cache first when the backend is
    /// a pure function of the prompt.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        if request.prompt.is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let cacheable = self.backend.prompt_deterministic();
        let key = cache_key(request);
        if cacheable {
            if let Some(cache) = &self.cache {
                if let Some(hit) = cache.get(&key) {
                    return Ok(hit);
                }
            }
        }

        let mut backoff = self.retry.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete_once(request) {
                Ok(response) => {
                    if cacheable {
                        if let Some(cache) = &self.cache {
                            cache.put(&key, &sha256_hex(request.prompt.as_bytes()), &response)?;
                        }
                    }
                    return Ok(response);
                }
                Err(error) if error.retryable() && attempt < self.retry.attempts => {
                    std::thread::sleep(backoff);
                    backoff = backoff.saturating_mul(2);
                }
                Err(error) => return Err(error),
            }
        }
    }

    /// Completes a batch with bounded parallelism, preserving order.
    pub fn complete_many(&self, requests: &[CompletionRequest]) -> Vec<Result<String, LlmError>> {
        let workers = self.parallelism.min(requests.len().max(1));
        if workers <= 1 {
            return requests.iter().map(|r| self.complete(r)).collect();
        }
        let next = AtomicU64::new(0);
        let slots: Vec<Mutex<Option<Result<String, LlmError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst) as usize;
                    if i >= requests.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(self.complete(&requests[i]));
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::AnswerChoice;
    use std::io::Read;
    use std::net::TcpListener;

    fn question() -> Question {
        Question {
            id: "q".into(),
            topic_id: "t".into(),
            text: "How important is it?".into(),
            choices: vec![
                AnswerChoice::new(0, "Essential", None),
                AnswerChoice::new(1, "Important but not essential", None),
                AnswerChoice::new(2, "Not important", None),
                AnswerChoice::new(3, "Should not be done", None),
            ],
            refusal_index: None,
        }
    }

    #[test]
    fn letter_rule_wins() {
        let q = question();
        let parsed = parse_answer("A. Essential", &q);
        assert_eq!(parsed.choice_index, Some(0));
        assert_eq!(parsed.parse_status, ParseStatus::LetterMatch);
        let parsed = parse_answer("  B)", &q);
        assert_eq!(parsed.choice_index, Some(1));
        assert_eq!(parsed.parse_status, ParseStatus::LetterMatch);
    }

    #[test]
    fn unique_text_containment() {
        let q = question();
        let parsed = parse_answer("I think the answer is Essential", &q);
        assert_eq!(parsed.choice_index, Some(0));
        assert_eq!(parsed.parse_status, ParseStatus::TextMatch);
    }

    #[test]
    fn multiple_texts_are_ambiguous() {
        let q = question();
        let parsed = parse_answer("Important but not essential or Not important", &q);
        assert_eq!(parsed.choice_index, None);
        assert_eq!(parsed.parse_status, ParseStatus::Ambiguous);
    }

    #[test]
    fn garbage_is_no_match() {
        let q = question();
        let parsed = parse_answer("I refuse to say", &q);
        assert_eq!(parsed.choice_index, None);
        assert_eq!(parsed.parse_status, ParseStatus::NoMatch);
        // Letter outside the label range falls through to text search.
        let parsed = parse_answer("Z.", &q);
        assert_eq!(parsed.parse_status, ParseStatus::NoMatch);
    }

    #[test]
    fn scripted_backend_and_cache_counter() {
        let mut map = HashMap::new();
        map.insert("p1".to_string(), "B".to_string());
        let client = CompletionClient::new(Box::new(ScriptedBackend::new(map)))
            .with_cache(CompletionCache::ephemeral())
            .with_retry(RetryPolicy::immediate());
        let request = CompletionRequest::new("p1", SCRIPTED_TAG);
        assert_eq!(client.complete(&request).unwrap(), "B");
        assert_eq!(client.backend_calls(), 1);
        assert_eq!(client.complete(&request).unwrap(), "B");
        assert_eq!(client.backend_calls(), 1, "second identical request must hit the cache");
    }

    #[test]
    fn scripted_miss_is_an_error_without_default() {
        let client = CompletionClient::new(Box::new(ScriptedBackend::new(HashMap::new())))
            .with_retry(RetryPolicy::immediate());
        assert!(matches!(
            client.complete(&CompletionRequest::new("p", SCRIPTED_TAG)),
            Err(LlmError::ScriptMiss)
        ));
        let with_default =
            CompletionClient::new(Box::new(ScriptedBackend::new(HashMap::new()).with_default("C")));
        assert_eq!(with_default.complete(&CompletionRequest::new("p", SCRIPTED_TAG)).unwrap(), "C");
    }

    #[test]
    fn oracle_reads_metadata_and_skips_cache() {
        let client = CompletionClient::new(Box::new(OracleBackend))
            .with_cache(CompletionCache::ephemeral());
        let mut request = CompletionRequest::new("same prompt", ORACLE_TAG);
        request.metadata.insert(META_GOLD_LABEL.into(), "C".into());
        assert_eq!(client.complete(&request).unwrap(), "C");
        // Same prompt, different gold: the cache must not interfere.
        request.metadata.insert(META_GOLD_LABEL.into(), "A".into());
        assert_eq!(client.complete(&request).unwrap(), "A");
    }

    #[test]
    fn uniform_random_is_prompt_deterministic() {
        let backend = UniformRandomBackend::new(9);
        let mut request = CompletionRequest::new("prompt text", UNIFORM_RANDOM_TAG);
        request.metadata.insert(META_N_CHOICES.into(), "4".into());
        let first = backend.complete_once(&request).unwrap();
        let second = backend.complete_once(&request).unwrap();
        assert_eq!(first, second);
        assert!(["A", "B", "C", "D"].contains(&first.as_str()));
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let client = CompletionClient::new(Box::new(OracleBackend));
        assert!(matches!(
            client.complete(&CompletionRequest::new("", ORACLE_TAG)),
            Err(LlmError::EmptyPrompt)
        ));
    }

    #[test]
    fn cache_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("completions.jsonl");
        let mut map = HashMap::new();
        map.insert("p".to_string(), "D".to_string());
        {
            let client = CompletionClient::new(Box::new(ScriptedBackend::new(map)))
                .with_cache(CompletionCache::open(&path).unwrap());
            assert_eq!(client.complete(&CompletionRequest::new("p", SCRIPTED_TAG)).unwrap(), "D");
        }
        // Fresh client with an empty script: served purely from cache.
        let client = CompletionClient::new(Box::new(ScriptedBackend::new(HashMap::new())))
            .with_cache(CompletionCache::open(&path).unwrap());
        assert_eq!(client.complete(&CompletionRequest::new("p", SCRIPTED_TAG)).unwrap(), "D");
        assert_eq!(client.backend_calls(), 0);
    }

    /// Minimal HTTP server answering each connection with a canned response.
    fn serve_responses(listener: TcpListener, responses: Vec<String>) -> std::thread::JoinHandle<()> {
        std::thread::spawn(move || {
            for response in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 4096];
                let mut read = 0;
                // Read until end of headers; bodies here are small enough to
                // arrive in the same packet.
                while read < buf.len() {
                    let n = stream.read(&mut buf[read..]).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    read += n;
                    if buf[..read].windows(4).any(|w| w == b"\r\n\r\n") {
                        break;
                    }
                }
                use std::io::Write as _;
                stream.write_all(response.as_bytes()).unwrap();
            }
        })
    }

    fn http_response(status: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    #[test]
    fn http_backend_retries_then_surfaces_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = serve_responses(
            listener,
            vec![
                http_response("500 Internal Server Error", "{}"),
                http_response("500 Internal Server Error", "{}"),
                http_response("500 Internal Server Error", "{}"),
            ],
        );
        std::env::set_var("PA_TEST_TOKEN_RETRY", "secret");
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: format!("http://{addr}/complete"),
            model: "test-model".into(),
            auth_token_env: "PA_TEST_TOKEN_RETRY".into(),
            timeout_secs: 5,
        })
        .unwrap();
        let client = CompletionClient::new(Box::new(backend)).with_retry(RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        });
        let err = client.complete(&CompletionRequest::new("p", "http:test-model")).unwrap_err();
        assert!(matches!(err, LlmError::Transport(_)), "got {err:?}");
        assert_eq!(client.backend_calls(), 3);
        handle.join().unwrap();
    }

    #[test]
    fn http_backend_success_and_auth_failure() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = serve_responses(
            listener,
            vec![
                http_response("200 OK", "{\"text\":\"B\"}"),
                http_response("401 Unauthorized", "{}"),
            ],
        );
        std::env::set_var("PA_TEST_TOKEN_OK", "secret");
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: format!("http://{addr}/complete"),
            model: "test-model".into(),
            auth_token_env: "PA_TEST_TOKEN_OK".into(),
            timeout_secs: 5,
        })
        .unwrap();
        let client = CompletionClient::new(Box::new(backend)).with_retry(RetryPolicy::immediate());
        assert_eq!(client.complete(&CompletionRequest::new("p1", "http:test-model")).unwrap(), "B");
        // Auth failures must not be retried.
        let err = client.complete(&CompletionRequest::new("p2", "http:test-model")).unwrap_err();
        assert!(matches!(err, LlmError::Auth(_)));
        assert_eq!(client.backend_calls(), 2);
        handle.join().unwrap();
    }

    #[test]
    fn missing_auth_env_fails_before_any_call() {
        let result = HttpBackend::new(HttpBackendConfig {
            endpoint: "http://127.0.0.1:9/x".into(),
            model: "m".into(),
            auth_token_env: "PA_TEST_TOKEN_MISSING".into(),
            timeout_secs: 1,
        });
        assert!(matches!(result.err(), Some(LlmError::Misconfigured(_))));
    }

    #[test]
    fn complete_many_preserves_order() {
        let mut map = HashMap::new();
        for i in 0..20 {
            map.insert(format!("prompt {i}"), format!("resp {i}"));
        }
        let client = CompletionClient::new(Box::new(ScriptedBackend::new(map))).with_parallelism(4);
        let requests: Vec<CompletionRequest> = (0..20)
            .map(|i| CompletionRequest::new(format!("prompt {i}"), SCRIPTED_TAG))
            .collect();
        let results = client.complete_many(&requests);
        for (i, result) in results.iter().enumerate() {
            assert_eq!(result.as_ref().unwrap(), &format!("resp {i}"));
        }
    }
}
