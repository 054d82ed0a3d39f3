//! Per-user opinion memory: embeddings, a disk-backed embedding cache, and
//! brute-force top-k cosine retrieval.
//!
//! Memories hold at most a few dozen vectors per user, so retrieval is an
//! exact scan; there is no approximate index.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::ingest::OpinionStatement;
use crate::survey::Question;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding backend failure: {0}")]
    Backend(String),
    #[error("embedding failed for statement \"{statement_id}\": {message}")]
    Statement { statement_id: String, message: String },
    #[error("cannot index an empty statement list")]
    NoStatements,
    #[error("memory is empty")]
    EmptyMemory,
    #[error("embedding cache io: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("embedding cache line {line}: {message}")]
    CacheFormat { line: usize, message: String },
    #[error("embedding dimension mismatch: memory built with ({dim}, {model_tag}), query is ({query_dim}, {query_tag})")]
    DimensionMismatch {
        dim: usize,
        model_tag: String,
        query_dim: usize,
        query_tag: String,
    },
}

/// A fixed-dimension embedding vector plus the tag of the model that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub dim: usize,
    pub model_tag: String,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, model_tag: impl Into<String>) -> Self {
        debug_assert!(vector.iter().all(|v| v.is_finite()));
        Self {
            dim: vector.len(),
            vector,
            model_tag: model_tag.into(),
        }
    }
}

/// What text the retrieval query embeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Question stem only. Choice texts carry scale vocabulary ("Essential",
    /// "Likely") that dominates similarity across unrelated questions.
    #[default]
    StemOnly,
    /// Question stem followed by all choice texts.
    StemAndChoices,
}

/// Retrieval knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    /// Cap applied by "all opinions" prompt variants.
    pub max_all_opinions: usize,
    #[serde(default)]
    pub query_mode: QueryMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            max_all_opinions: 16,
            query_mode: QueryMode::StemOnly,
        }
    }
}

/// An opinion statement scored by cosine similarity against a query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredOpinion {
    pub statement: OpinionStatement,
    pub similarity: f64,
}

/// Text embedding backend.
pub trait Embedder: Send + Sync {
    fn model_tag(&self) -> &str;

    /// Embeds one text. Deterministic per (backend, text); empty text is an error.
    fn embed(&self, text: &str) -> Result<Embedding, MemoryError>;

    /// Embeds a batch; the default just loops.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, MemoryError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

impl Embedder for Box<dyn Embedder> {
    fn model_tag(&self) -> &str {
        self.as_ref().model_tag()
    }

    fn embed(&self, text: &str) -> Result<Embedding, MemoryError> {
        self.as_ref().embed(text)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, MemoryError> {
        self.as_ref().embed_batch(texts)
    }
}

/// Deterministic offline embedder: character n-grams (n = 1..=3) hashed into
/// a signed 256-dimensional count vector with a fixed salt.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    salt: u64,
}

pub const HASH_EMBEDDER_TAG: &str = "test-hash-256";
pub const HASH_EMBEDDER_DIM: usize = 256;

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { salt: 0x70616c69 }
    }
}

impl Embedder for HashEmbedder {
    fn model_tag(&self) -> &str {
        HASH_EMBEDDER_TAG
    }

    fn embed(&self, text: &str) -> Result<Embedding, MemoryError> {
        if text.is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let mut vector = vec![0.0f64; HASH_EMBEDDER_DIM];
        let chars: Vec<char> = text.chars().collect();
        for n in 1..=3usize {
            if chars.len() < n {
                continue;
            }
            for gram in chars.windows(n) {
                let mut hasher = Sha256::new();
                hasher.update(self.salt.to_le_bytes());
                hasher.update([n as u8]);
                let gram_string: String = gram.iter().collect();
                hasher.update(gram_string.as_bytes());
                let digest = hasher.finalize();
                let hash = u64::from_le_bytes(digest[..8].try_into().unwrap());
                let bucket = (hash % HASH_EMBEDDER_DIM as u64) as usize;
                let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
                vector[bucket] += sign;
            }
        }
        Ok(Embedding::new(vector, HASH_EMBEDDER_TAG))
    }
}

/// HTTP embedding backend configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub endpoint: String,
    /// Model identifier sent as the embedding's model tag.
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    30
}

/// Embedder speaking the JSON wire shape `{input: [texts]} -> {vectors: [[..]]}`.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    token: String,
    client: reqwest::blocking::Client,
    attempts: usize,
    initial_backoff: std::time::Duration,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self, MemoryError> {
        let token = std::env::var(&config.auth_token_env).map_err(|_| {
            MemoryError::Backend(format!("auth env var {} is not set", config.auth_token_env))
        })?;
        reqwest::Url::parse(&config.endpoint)
            .map_err(|e| MemoryError::Backend(format!("bad endpoint {}: {e}", config.endpoint)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| MemoryError::Backend(e.to_string()))?;
        Ok(Self {
            config,
            token,
            client,
            attempts: 3,
            initial_backoff: std::time::Duration::from_secs(1),
        })
    }

    #[cfg(test)]
    pub(crate) fn with_backoff(mut self, initial: std::time::Duration) -> Self {
        self.initial_backoff = initial;
        self
    }

    fn post_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, MemoryError> {
        let mut backoff = self.initial_backoff;
        let mut last_error = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            let sent = self
                .client
                .post(&self.config.endpoint)
                .bearer_auth(&self.token)
                .json(&EmbedRequest { input: texts })
                .send();
            match sent {
                Ok(response) if response.status().is_success() => {
                    let parsed: EmbedResponse = response
                        .json()
                        .map_err(|e| MemoryError::Backend(format!("bad response body: {e}")))?;
                    if parsed.vectors.len() != texts.len() {
                        return Err(MemoryError::Backend(format!(
                            "expected {} vectors, got {}",
                            texts.len(),
                            parsed.vectors.len()
                        )));
                    }
                    return Ok(parsed
                        .vectors
                        .into_iter()
                        .map(|v| Embedding::new(v, self.config.model.clone()))
                        .collect());
                }
                Ok(response) => {
                    let status = response.status();
                    last_error = format!("http {status}");
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(MemoryError::Backend(last_error));
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(MemoryError::Backend(format!(
            "transport failure after {} attempts: {last_error}",
            self.attempts
        )))
    }
}

impl Embedder for HttpEmbedder {
    fn model_tag(&self) -> &str {
        &self.config.model
    }

    fn embed(&self, text: &str) -> Result<Embedding, MemoryError> {
        if text.is_empty() {
            return Err(MemoryError::EmptyText);
        }
        Ok(self.post_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, MemoryError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(MemoryError::EmptyText);
        }
        self.post_batch(texts)
    }
}

/// Disk-backed embedding cache: one JSON record per line,
/// `{model_tag, text_hash, vector}`. Concurrent readers share the in-memory
/// map; appends are serialized behind a mutex.
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    state: Mutex<CacheState>,
}

struct CacheState {
    entries: HashMap<(String, String), Vec<f64>>,
    writer: Option<std::fs::File>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    model_tag: String,
    text_hash: String,
    vector: Vec<f64>,
}

impl EmbeddingCache {
    /// In-memory cache with no persistence.
    pub fn ephemeral() -> Self {
        Self {
            path: None,
            state: Mutex::new(CacheState {
                entries: HashMap::new(),
                writer: None,
            }),
        }
    }

    /// Opens (or creates) a persistent cache file and loads existing records.
    pub fn open(path: &Path) -> Result<Self, MemoryError> {
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
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| MemoryError::CacheFormat {
                        line: zero_line + 1,
                        message: e.to_string(),
                    })?;
                entries.insert((record.model_tag, record.text_hash), record.vector);
            }
        }
        let writer = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            state: Mutex::new(CacheState {
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

    fn get(&self, model_tag: &str, text_hash: &str) -> Option<Vec<f64>> {
        self.state
            .lock()
            .unwrap()
            .entries
            .get(&(model_tag.to_string(), text_hash.to_string()))
            .cloned()
    }

    fn put(&self, model_tag: &str, text_hash: &str, vector: &[f64]) -> Result<(), MemoryError> {
        let mut state = self.state.lock().unwrap();
        let key = (model_tag.to_string(), text_hash.to_string());
        if state.entries.contains_key(&key) {
            return Ok(());
        }
        state.entries.insert(key, vector.to_vec());
        if let Some(writer) = state.writer.as_mut() {
            let record = CacheRecord {
                model_tag: model_tag.to_string(),
                text_hash: text_hash.to_string(),
                vector: vector.to_vec(),
            };
            let mut line = serde_json::to_string(&record).expect("cache record serializes");
            line.push('\n');
            writer.write_all(line.as_bytes())?;
            writer.flush()?;
        }
        Ok(())
    }
}

/// Wraps any embedder with a cache keyed by (model_tag, sha256 of text).
pub struct CachedEmbedder<E> {
    inner: E,
    cache: EmbeddingCache,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }

    fn embed(&self, text: &str) -> Result<Embedding, MemoryError> {
        if text.is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let text_hash = sha256_hex(text.as_bytes());
        if let Some(vector) = self.cache.get(self.inner.model_tag(), &text_hash) {
            return Ok(Embedding::new(vector, self.inner.model_tag()));
        }
        let embedding = self.inner.embed(text)?;
        self.cache.put(&embedding.model_tag, &text_hash, &embedding.vector)?;
        Ok(embedding)
    }
}

/// Immutable snapshot of one user's embedded opinion statements.
#[derive(Debug, Clone)]
pub struct UserMemory {
    pub user_id: String,
    entries: Vec<(OpinionStatement, Embedding)>,
}

impl UserMemory {
    /// Builds a memory from pre-embedded statements (test and replay paths).
    pub fn from_embedded(user_id: &str, entries: Vec<(OpinionStatement, Embedding)>) -> Self {
        Self {
            user_id: user_id.to_string(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn statements(&self) -> impl Iterator<Item = &OpinionStatement> {
        self.entries.iter().map(|(s, _)| s)
    }
}

/// Embeds all statements (cache consulted first through the embedder) and
/// returns an immutable searchable snapshot. Fails atomically: any embedding
/// error names the offending statement and no handle is produced.
pub fn index_user(
    user_id: &str,
    statements: &[OpinionStatement],
    embedder: &dyn Embedder,
) -> Result<UserMemory, MemoryError> {
    if statements.is_empty() {
        return Err(MemoryError::NoStatements);
    }
    let mut entries = Vec::with_capacity(statements.len());
    for statement in statements {
        let embedding = embedder.embed(&statement.text).map_err(|e| MemoryError::Statement {
            statement_id: statement.question_id.clone(),
            message: e.to_string(),
        })?;
        entries.push((statement.clone(), embedding));
    }
    Ok(UserMemory::from_embedded(user_id, entries))
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    dot / (norm_a.sqrt() * norm_b.sqrt())
}

/// Query text for a question under the configured [`QueryMode`].
pub fn query_text(question: &Question, mode: QueryMode) -> String {
    match mode {
        QueryMode::StemOnly => question.text.clone(),
        QueryMode::StemAndChoices => {
            let mut text = question.text.clone();
            for choice in &question.choices {
                text.push(' ');
                text.push_str(&choice.text);
            }
            text
        }
    }
}

/// Returns the `min(k, size)` stored statements most cosine-similar to the
/// question, sorted by similarity descending with ties broken by ascending
/// question id. Implemented as a full sort then truncate, so top-k is always
/// a prefix of top-(k+1).
pub fn retrieve_top_k(
    memory: &UserMemory,
    question: &Question,
    config: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredOpinion>, MemoryError> {
    rank_all(memory, question, config, embedder).map(|mut scored| {
        scored.truncate(config.k);
        scored
    })
}

/// Scores and ranks every stored statement against the question.
pub fn rank_all(
    memory: &UserMemory,
    question: &Question,
    config: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredOpinion>, MemoryError> {
    if memory.is_empty() {
        return Err(MemoryError::EmptyMemory);
    }
    let query = embedder.embed(&query_text(question, config.query_mode))?;
    if let Some((_, first)) = memory.entries.first() {
        if first.dim != query.dim || first.model_tag != query.model_tag {
            return Err(MemoryError::DimensionMismatch {
                dim: first.dim,
                model_tag: first.model_tag.clone(),
                query_dim: query.dim,
                query_tag: query.model_tag.clone(),
            });
        }
    }
    let mut scored: Vec<ScoredOpinion> = memory
        .entries
        .iter()
        .map(|(statement, embedding)| ScoredOpinion {
            statement: statement.clone(),
            similarity: cosine_similarity(&query.vector, &embedding.vector),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.statement.question_id.cmp(&b.statement.question_id))
    });
    Ok(scored)
}
