//! Tokenization, word-vector tables and the sentence/emotion embedding providers.
//!
//! Providers come in three flavours behind [`EmbeddingProvider`]:
//! [`SidecarProvider`] reads snapshotted vectors from JSONL, [`RemoteProvider`]
//! talks to an embedding service over HTTP, and [`DeterministicProvider`] hashes
//! tokens into vectors so everything runs without model weights.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SENTENCE_DIM: usize = 4096;
pub const EMOTION_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("provider serves {found:?} embeddings, {expected:?} requested")]
    WrongKind { expected: EmbeddingKind, found: EmbeddingKind },
    #[error("embedding has length {found}, expected {expected}")]
    WrongLength { expected: usize, found: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("emotion embedding has no probability mass")]
    EmptyDistribution,
    #[error("no snapshot entry for text {0:?}")]
    MissingEntry(String),
    #[error("embedding service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("malformed embedding service reply: {0}")]
    Protocol(String),
}

/// Lowercases, splits on whitespace and peels trailing `. , ! ?` into their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let stem = word.trim_end_matches(is_terminal_punct);
        if !stem.is_empty() {
            tokens.push(stem.to_string());
        }
        tokens.extend(word[stem.len()..].chars().map(String::from));
    }
    tokens
}

fn is_terminal_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?')
}

pub fn is_punctuation_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation())
}

/// Token to dense vector lookup. Keys are lowercased to match [`tokenize`].
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dimension: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "word vectors need a positive dimension");
        WordVectorTable {
            dimension,
            entries: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts unless the token is already present. Returns whether it was inserted.
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<bool, EmbeddingError> {
        if vector.len() != self.dimension {
            return Err(EmbeddingError::WrongLength {
                expected: self.dimension,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let key = token.to_lowercase();
        if self.entries.contains_key(&key) {
            return Ok(false);
        }
        self.entries.insert(key, vector);
        Ok(true)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        match self.entries.get(token) {
            Some(v) => Some(v.as_slice()),
            None => self.entries.get(&token.to_lowercase()).map(Vec::as_slice),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.get(token).is_some()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::parse(BufReader::new(File::open(path)?))
    }

    /// Parses the text format `token v1 ... vd`, with an optional `count dim` header line.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let mut table: Option<WordVectorTable> = None;
        let mut first = true;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if first {
                first = false;
                if fields.len() == 2 {
                    if let (Ok(_), Ok(dim)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                        if dim == 0 {
                            return Err(EmbeddingError::Parse {
                                line: lineno,
                                message: "header declares dimension 0".into(),
                            });
                        }
                        table = Some(WordVectorTable::new(dim));
                        continue;
                    }
                }
            }
            if fields.len() < 2 {
                return Err(EmbeddingError::Parse {
                    line: lineno,
                    message: "expected a token followed by at least one value".into(),
                });
            }
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EmbeddingError::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            let t = table.get_or_insert_with(|| WordVectorTable::new(values.len()));
            if values.len() != t.dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    line: lineno,
                    expected: t.dimension,
                    found: values.len(),
                });
            }
            t.insert(fields[0], values).map_err(|e| EmbeddingError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        }
        table.ok_or(EmbeddingError::Parse {
            line: 0,
            message: "no word vectors found".into(),
        })
    }

    /// Hash-seeded vectors for every token in `vocabulary`, for running without pretrained vectors.
    pub fn deterministic<'a, I>(vocabulary: I, dimension: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut table = WordVectorTable::new(dimension);
        for token in vocabulary {
            let v = hashed_uniform("word", token, dimension);
            table.insert(token, v).expect("hashed vectors are finite");
        }
        table
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Word,
    Sentence,
    Emotion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderSource {
    File,
    Remote,
    DeterministicTest,
}

/// A text-to-vector model. Repeated calls with the same text must return identical vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn kind(&self) -> EmbeddingKind;
    fn source(&self) -> ProviderSource;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding(Vec<f64>);

impl SentenceEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A probability distribution over the 64 emoji classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionEmbedding(Vec<f64>);

impl EmotionEmbedding {
    /// Clamps negatives to zero and renormalizes onto the simplex.
    pub fn from_raw(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.len() != EMOTION_DIM {
            return Err(EmbeddingError::WrongLength {
                expected: EMOTION_DIM,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        for v in values.iter_mut() {
            *v = v.max(0.0);
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(EmbeddingError::EmptyDistribution);
        }
        for v in values.iter_mut() {
            *v /= total;
        }
        Ok(EmotionEmbedding(values))
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }
}

fn expect_kind(provider: &dyn EmbeddingProvider, expected: EmbeddingKind) -> Result<(), EmbeddingError> {
    if provider.kind() != expected {
        return Err(EmbeddingError::WrongKind {
            expected,
            found: provider.kind(),
        });
    }
    Ok(())
}

pub fn embed_sentence(provider: &dyn EmbeddingProvider, text: &str) -> Result<SentenceEmbedding, EmbeddingError> {
    expect_kind(provider, EmbeddingKind::Sentence)?;
    let v = provider.embed(text)?;
    if v.len() != SENTENCE_DIM {
        return Err(EmbeddingError::WrongLength {
            expected: SENTENCE_DIM,
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    Ok(SentenceEmbedding(v))
}

pub fn embed_emotion(provider: &dyn EmbeddingProvider, text: &str) -> Result<EmotionEmbedding, EmbeddingError> {
    expect_kind(provider, EmbeddingKind::Emotion)?;
    EmotionEmbedding::from_raw(provider.embed(text)?)
}

fn hash_seed(domain: &str, token: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(token.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn hashed_uniform(domain: &str, token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(domain, token));
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Hash-based stand-in for the pretrained sentence and emotion models.
///
/// Every token maps to a fixed pseudo-random vector seeded by its SHA-256.
/// Sentence embeddings are the L2-normalized sum of token vectors, so texts
/// sharing words are similar. Emotion embeddings are a softmax over the mean
/// of per-token logits.
pub struct DeterministicProvider {
    kind: EmbeddingKind,
    cache: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

const EMOTION_LOGIT_SCALE: f64 = 3.0;

impl DeterministicProvider {
    pub fn sentence() -> Self {
        Self::new(EmbeddingKind::Sentence)
    }

    pub fn emotion() -> Self {
        Self::new(EmbeddingKind::Emotion)
    }

    fn new(kind: EmbeddingKind) -> Self {
        DeterministicProvider {
            kind,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn token_vector(&self, token: &str) -> Arc<Vec<f64>> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(token) {
            return Arc::clone(v);
        }
        let (domain, dim) = match self.kind {
            EmbeddingKind::Emotion => ("emotion", EMOTION_DIM),
            _ => ("sentence", SENTENCE_DIM),
        };
        let v = Arc::new(hashed_uniform(domain, token, dim));
        self.cache
            .lock()
            .expect("cache lock")
            .entry(token.to_string())
            .or_insert(v)
            .clone()
    }
}

impl EmbeddingProvider for DeterministicProvider {
    fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    fn source(&self) -> ProviderSource {
        ProviderSource::DeterministicTest
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push(String::new());
        }
        match self.kind {
            EmbeddingKind::Emotion => {
                let mut logits = vec![0.0; EMOTION_DIM];
                for t in &tokens {
                    for (acc, x) in logits.iter_mut().zip(self.token_vector(t).iter()) {
                        *acc += x;
                    }
                }
                let scale = EMOTION_LOGIT_SCALE / tokens.len() as f64;
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| ((l - max) * scale).exp()).collect();
                let total: f64 = exps.iter().sum();
                Ok(exps.into_iter().map(|e| e / total).collect())
            }
            _ => {
                let mut sum = vec![0.0; SENTENCE_DIM];
                for t in &tokens {
                    for (acc, x) in sum.iter_mut().zip(self.token_vector(t).iter()) {
                        *acc += x;
                    }
                }
                let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Ok(self.token_vector("").to_vec());
                }
                Ok(sum.into_iter().map(|x| x / norm).collect())
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarLine {
    text: String,
    vector: Vec<f64>,
}

/// Vectors snapshotted from a real model, keyed by exact text.
pub struct SidecarProvider {
    kind: EmbeddingKind,
    entries: HashMap<String, Vec<f64>>,
    fallback: Option<Arc<dyn EmbeddingProvider>>,
}

impl SidecarProvider {
    pub fn load(path: impl AsRef<Path>, kind: EmbeddingKind) -> Result<Self, EmbeddingError> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = HashMap::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarLine = serde_json::from_str(&line).map_err(|e| EmbeddingError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let expected = *dim.get_or_insert(rec.vector.len());
            if rec.vector.len() != expected {
                return Err(EmbeddingError::DimensionMismatch {
                    line: i + 1,
                    expected,
                    found: rec.vector.len(),
                });
            }
            entries.entry(rec.text).or_insert(rec.vector);
        }
        Ok(SidecarProvider {
            kind,
            entries,
            fallback: None,
        })
    }

    pub fn from_entries(kind: EmbeddingKind, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        SidecarProvider {
            kind,
            entries: entries.into_iter().collect(),
            fallback: None,
        }
    }

    /// Texts missing from the snapshot are delegated to `fallback`.
    pub fn with_fallback(mut self, fallback: Arc<dyn EmbeddingProvider>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl EmbeddingProvider for SidecarProvider {
    fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    fn source(&self) -> ProviderSource {
        ProviderSource::File
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        match (self.entries.get(text), &self.fallback) {
            (Some(v), _) => Ok(v.clone()),
            (None, Some(fb)) => fb.embed(text),
            (None, None) => Err(EmbeddingError::MissingEntry(text.to_string())),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub kind: EmbeddingKind,
    pub texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Client for an embedding service speaking `POST /embed`.
pub struct RemoteProvider {
    kind: EmbeddingKind,
    endpoint: String,
    agent: ureq::Agent,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl RemoteProvider {
    pub fn new(base_url: &str, kind: EmbeddingKind, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteProvider {
            kind,
            endpoint: format!("{}/embed", base_url.trim_end_matches('/')),
            agent,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let body = EmbedRequest {
            kind: self.kind,
            texts: texts.iter().map(|t| t.to_string()).collect(),
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let detail = resp
                .body_mut()
                .read_json::<ErrorBody>()
                .map(|b| b.error)
                .unwrap_or_else(|_| status.to_string());
            return Err(if status.is_server_error() {
                EmbeddingError::RemoteUnavailable(detail)
            } else {
                EmbeddingError::Protocol(format!("{status}: {detail}"))
            });
        }
        let reply: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Protocol(e.to_string()))?;
        if reply.vectors.len() != texts.len() {
            return Err(EmbeddingError::Protocol(format!(
                "asked for {} vectors, received {}",
                texts.len(),
                reply.vectors.len()
            )));
        }
        Ok(reply.vectors)
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    fn source(&self) -> ProviderSource {
        ProviderSource::Remote
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    // Memoized so a text keeps its first vector even if the service is nondeterministic.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        if !missing.is_empty() {
            let vectors = self.request(&missing)?;
            let mut cache = self.cache.lock().expect("cache lock");
            for (t, v) in missing.into_iter().zip(vectors) {
                cache.entry(t.to_string()).or_insert(v);
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}
