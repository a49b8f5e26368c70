//! Utterance-, pair- and conversation-level dialog metrics.
//!
//! Pair metrics compare a query utterance with the response that follows it.
//! [`FeatureExtractor::conversation_features`] aggregates everything into a
//! [`MetricVector`], the input of the hybrid quality model.

pub mod embedding;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{
    cosine, embedding_average, greedy_score, reference_metric, token_similarity, vector_extrema, word_coherence,
    EmbeddingMetric,
};

use crate::domain::{Conversation, Speaker, Utterance};
use crate::embeddings::{
    embed_emotion, embed_sentence, is_punctuation_token, tokenize, EmbeddingError, EmbeddingProvider, EmotionEmbedding,
    WordVectorTable, EMOTION_DIM,
};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no token has a word vector")]
    NoVectorTokens,
    #[error("word vectors sum to zero")]
    ZeroSum,
    #[error("not enough turns for this metric")]
    InsufficientTurns,
    #[error("invalid emoji weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl MetricError {
    /// Errors that make a metric undefined for one pair rather than failing the run.
    pub fn is_undefined(&self) -> bool {
        matches!(
            self,
            MetricError::ZeroVector | MetricError::NoVectorTokens | MetricError::ZeroSum | MetricError::DimensionMismatch(..)
        )
    }
}

/// The 64 emoji classes of the emotion model, in output order.
pub const EMOJI_LABELS: [&str; EMOTION_DIM] = [
    "joy", "unamused", "weary", "sob", "heart_eyes", "pensive", "ok_hand", "blush",
    "heart", "smirk", "grin", "notes", "flushed", "100", "sleeping", "relieved",
    "relaxed", "raised_hands", "two_hearts", "expressionless", "sweat_smile", "pray", "confused", "kissing_heart",
    "heartbeat", "neutral_face", "information_desk_person", "disappointed", "see_no_evil", "tired_face", "v", "sunglasses",
    "rage", "thumbsup", "cry", "sleepy", "yum", "triumph", "hand", "mask",
    "clap", "eyes", "gun", "persevere", "smiling_imp", "sweat", "broken_heart", "yellow_heart",
    "musical_note", "speak_no_evil", "wink", "skull", "confounded", "smile", "stuck_out_tongue_winking_eye", "angry",
    "no_good", "muscle", "facepunch", "purple_heart", "sparkling_heart", "blue_heart", "grimacing", "sparkles",
];

const DEFAULT_EMOJI_WEIGHTS: &str = include_str!("../../data/emoji_weights.txt");

/// Per-emoji weights reducing an emotion embedding to a scalar sentiment.
#[derive(Debug, Clone, PartialEq)]
pub struct EmojiWeights([f64; EMOTION_DIM]);

impl EmojiWeights {
    pub fn new(weights: [f64; EMOTION_DIM]) -> Result<Self, MetricError> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(MetricError::InvalidWeights("weights must be finite".into()));
        }
        Ok(EmojiWeights(weights))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        let text = std::fs::read_to_string(path).map_err(EmbeddingError::from)?;
        text.parse()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn min(&self) -> f64 {
        self.0.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Default for EmojiWeights {
    /// +1 for clearly positive emoji, -1 for clearly negative, 0 otherwise.
    fn default() -> Self {
        DEFAULT_EMOJI_WEIGHTS.parse().expect("bundled emoji weights are valid")
    }
}

impl FromStr for EmojiWeights {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| MetricError::InvalidWeights(format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let arr: [f64; EMOTION_DIM] = values
            .try_into()
            .map_err(|v: Vec<f64>| MetricError::InvalidWeights(format!("expected {EMOTION_DIM} weights, found {}", v.len())))?;
        EmojiWeights::new(arr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub question_words: Vec<String>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            question_words: ["who", "what", "when", "where", "why", "how", "which", "whose", "whom"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

pub fn sentiment_score(emotion: &EmotionEmbedding, weights: &EmojiWeights) -> f64 {
    emotion.probabilities().iter().zip(weights.as_slice()).map(|(p, w)| p * w).sum()
}

pub fn sentiment_coherence(query: &str, response: &str, emotion: &dyn EmbeddingProvider) -> Result<f64, MetricError> {
    let q = embed_emotion(emotion, query)?;
    let r = embed_emotion(emotion, response)?;
    cosine(q.probabilities(), r.probabilities())
}

pub fn semantic_similarity(query: &str, response: &str, sentence: &dyn EmbeddingProvider) -> Result<f64, MetricError> {
    let q = embed_sentence(sentence, query)?;
    let r = embed_sentence(sentence, response)?;
    cosine(q.as_slice(), r.as_slice())
}

/// Mean change between consecutive points of a sentiment trajectory, looking `lag` steps ahead.
fn mean_transition(series: &[f64], lag: usize) -> Option<f64> {
    if series.len() <= lag {
        return None;
    }
    let diffs: Vec<f64> = series.windows(lag + 1).map(|w| w[lag] - w[0]).collect();
    Some(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Signed slope between the (first) minimum and (first) maximum of a trajectory.
fn minmax_slope(series: &[f64]) -> Option<f64> {
    if series.is_empty() {
        return None;
    }
    let (mut i_min, mut i_max) = (0, 0);
    for (i, &s) in series.iter().enumerate() {
        if s < series[i_min] {
            i_min = i;
        }
        if s > series[i_max] {
            i_max = i;
        }
    }
    if i_min == i_max {
        return Some(0.0);
    }
    Some((series[i_max] - series[i_min]) / (i_max as f64 - i_min as f64))
}

fn user_sentiments(conv: &Conversation, weights: &EmojiWeights, emotion: &dyn EmbeddingProvider) -> Result<Vec<f64>, MetricError> {
    conv.by_speaker(Speaker::A)
        .map(|u| Ok(sentiment_score(&embed_emotion(emotion, &u.text)?, weights)))
        .collect()
}

/// Mean change in the user's sentiment across each bot response.
pub fn sentiment_transition(conv: &Conversation, weights: &EmojiWeights, emotion: &dyn EmbeddingProvider) -> Result<f64, MetricError> {
    let s = user_sentiments(conv, weights, emotion)?;
    mean_transition(&s, 1).ok_or(MetricError::InsufficientTurns)
}

/// Slope from the user's minimum to maximum sentiment, over user-turn positions.
pub fn sentiment_minmax(conv: &Conversation, weights: &EmojiWeights, emotion: &dyn EmbeddingProvider) -> Result<f64, MetricError> {
    let s = user_sentiments(conv, weights, emotion)?;
    Ok(minmax_slope(&s).unwrap_or(0.0))
}

static LAUGHTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^a?(ha)+h?$").expect("valid regex"));

/// Number of "ha"s across laughter-like tokens ("haha", "ahahah", ...).
pub fn laughter(text: &str) -> usize {
    tokenize(text)
        .iter()
        .filter(|t| LAUGHTER.is_match(t))
        .map(|t| t.matches("ha").count())
        .sum()
}

/// 1 if the text contains a question mark or opens with a question word.
pub fn question_score(text: &str, config: &MetricConfig) -> f64 {
    let tokens = tokenize(text);
    let asks = tokens.iter().any(|t| t == "?")
        || tokens
            .first()
            .is_some_and(|t| config.question_words.iter().any(|q| q == t));
    if asks {
        1.0
    } else {
        0.0
    }
}

pub fn word_count(text: &str) -> usize {
    tokenize(text).iter().filter(|t| !is_punctuation_token(t)).count()
}

/// How query/response pairs are formed from a conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Each user (A) utterance paired with the bot (B) reply that follows it.
    UserBot,
    /// Every consecutive pair of utterances, regardless of role.
    BotBot,
}

impl FromStr for Pairing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user-bot" => Ok(Pairing::UserBot),
            "bot-bot" => Ok(Pairing::BotBot),
            other => Err(format!("unknown pairing `{other}`")),
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::UserBot => "user-bot",
            Pairing::BotBot => "bot-bot",
        })
    }
}

pub const FEATURE_COUNT: usize = 11;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "sentiment",
    "sentiment_coherence",
    "sentiment_transition",
    "sentiment_minmax",
    "laughter",
    "semantic_similarity",
    "avg_word_coherence",
    "ext_word_coherence",
    "grd_word_coherence",
    "question_score",
    "n_words",
];

/// Conversation-level metric aggregates. `None` marks a metric with no defined pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub sentiment: Option<f64>,
    pub sentiment_coherence: Option<f64>,
    pub sentiment_transition: Option<f64>,
    pub sentiment_minmax: Option<f64>,
    pub laughter: Option<f64>,
    pub semantic_similarity: Option<f64>,
    pub avg_word_coherence: Option<f64>,
    pub ext_word_coherence: Option<f64>,
    pub grd_word_coherence: Option<f64>,
    pub question_score: Option<f64>,
    pub n_words: Option<f64>,
}

impl MetricVector {
    pub fn to_array(&self) -> [Option<f64>; FEATURE_COUNT] {
        [
            self.sentiment,
            self.sentiment_coherence,
            self.sentiment_transition,
            self.sentiment_minmax,
            self.laughter,
            self.semantic_similarity,
            self.avg_word_coherence,
            self.ext_word_coherence,
            self.grd_word_coherence,
            self.question_score,
            self.n_words,
        ]
    }

    pub fn from_array(a: [Option<f64>; FEATURE_COUNT]) -> Self {
        MetricVector {
            sentiment: a[0],
            sentiment_coherence: a[1],
            sentiment_transition: a[2],
            sentiment_minmax: a[3],
            laughter: a[4],
            semantic_similarity: a[5],
            avg_word_coherence: a[6],
            ext_word_coherence: a[7],
            grd_word_coherence: a[8],
            question_score: a[9],
            n_words: a[10],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).and_then(|i| self.to_array()[i])
    }

    /// CSV cells in [`FEATURE_NAMES`] order; missing values are empty.
    pub fn csv_cells(&self) -> Vec<String> {
        self.to_array().iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect()
    }

    pub fn from_csv_cells<S: AsRef<str>>(cells: &[S]) -> Result<Self, String> {
        if cells.len() != FEATURE_COUNT {
            return Err(format!("expected {FEATURE_COUNT} metric columns, found {}", cells.len()));
        }
        let mut a = [None; FEATURE_COUNT];
        for (slot, cell) in a.iter_mut().zip(cells) {
            let cell = cell.as_ref().trim();
            if !cell.is_empty() {
                *slot = Some(cell.parse::<f64>().map_err(|e| format!("`{cell}`: {e}"))?);
            }
        }
        Ok(MetricVector::from_array(a))
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Running mean of a pair metric that skips undefined pairs.
#[derive(Default)]
struct PairMean(Vec<f64>);

impl PairMean {
    fn push(&mut self, r: Result<f64, MetricError>) -> Result<(), MetricError> {
        match r {
            Ok(v) => self.0.push(v),
            Err(e) if e.is_undefined() => {}
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn finish(&self) -> Option<f64> {
        mean(&self.0)
    }
}

/// Bundles the embedding providers, emoji weights and config needed to score conversations.
#[derive(Clone)]
pub struct FeatureExtractor {
    pub words: Arc<WordVectorTable>,
    pub sentence: Arc<dyn EmbeddingProvider>,
    pub emotion: Arc<dyn EmbeddingProvider>,
    pub weights: EmojiWeights,
    pub config: MetricConfig,
}

impl FeatureExtractor {
    pub fn new(words: Arc<WordVectorTable>, sentence: Arc<dyn EmbeddingProvider>, emotion: Arc<dyn EmbeddingProvider>) -> Self {
        FeatureExtractor {
            words,
            sentence,
            emotion,
            weights: EmojiWeights::default(),
            config: MetricConfig::default(),
        }
    }

    pub fn with_weights(mut self, weights: EmojiWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_config(mut self, config: MetricConfig) -> Self {
        self.config = config;
        self
    }

    /// Query/response index pairs under `pairing`.
    pub fn pairs(conv: &Conversation, pairing: Pairing) -> Vec<(usize, usize)> {
        let u = conv.utterances();
        (1..u.len())
            .filter(|&i| match pairing {
                Pairing::BotBot => true,
                Pairing::UserBot => u[i - 1].speaker == Speaker::A && u[i].speaker == Speaker::B,
            })
            .map(|i| (i - 1, i))
            .collect()
    }

    pub fn conversation_features(&self, conv: &Conversation, pairing: Pairing) -> Result<MetricVector, MetricError> {
        let utts = conv.utterances();
        if utts.len() < 2 {
            return Err(MetricError::InsufficientTurns);
        }
        let pairs = Self::pairs(conv, pairing);
        if pairs.is_empty() {
            return Err(MetricError::InsufficientTurns);
        }

        let mut emotions: HashMap<usize, EmotionEmbedding> = HashMap::new();
        let mut emotion_of = |i: usize| -> Result<EmotionEmbedding, MetricError> {
            if let Some(e) = emotions.get(&i) {
                return Ok(e.clone());
            }
            let e = embed_emotion(self.emotion.as_ref(), &utts[i].text)?;
            emotions.insert(i, e.clone());
            Ok(e)
        };

        let query_side: Vec<&Utterance> = match pairing {
            Pairing::UserBot => conv.by_speaker(Speaker::A).collect(),
            Pairing::BotBot => utts[..utts.len() - 1].iter().collect(),
        };
        let mut sentiments = Vec::new();
        for u in &query_side {
            sentiments.push(sentiment_score(&emotion_of(u.index)?, &self.weights));
        }
        let laughs: Vec<f64> = query_side.iter().map(|u| laughter(&u.text) as f64).collect();
        let words: Vec<f64> = query_side.iter().map(|u| word_count(&u.text) as f64).collect();

        let (transition, minmax) = match pairing {
            Pairing::UserBot => (mean_transition(&sentiments, 1), minmax_slope(&sentiments)),
            Pairing::BotBot => {
                let mut trajectory = Vec::with_capacity(utts.len());
                for i in 0..utts.len() {
                    trajectory.push(sentiment_score(&emotion_of(i)?, &self.weights));
                }
                (mean_transition(&trajectory, 2), minmax_slope(&trajectory))
            }
        };

        let mut coherence = PairMean::default();
        let mut semantic = PairMean::default();
        let mut word_coh: [PairMean; 3] = Default::default();
        let mut questions = Vec::with_capacity(pairs.len());
        for &(q, r) in &pairs {
            let (qe, re) = (emotion_of(q)?, emotion_of(r)?);
            coherence.push(cosine(qe.probabilities(), re.probabilities()))?;
            semantic.push(semantic_similarity(&utts[q].text, &utts[r].text, self.sentence.as_ref()))?;
            let qt = tokenize(&utts[q].text);
            let rt = tokenize(&utts[r].text);
            for (acc, kind) in word_coh.iter_mut().zip(EmbeddingMetric::ALL) {
                acc.push(token_similarity(kind, &qt, &rt, &self.words))?;
            }
            questions.push(question_score(&utts[r].text, &self.config));
        }

        Ok(MetricVector {
            sentiment: mean(&sentiments),
            sentiment_coherence: coherence.finish(),
            sentiment_transition: transition,
            sentiment_minmax: minmax,
            laughter: mean(&laughs),
            semantic_similarity: semantic.finish(),
            avg_word_coherence: word_coh[0].finish(),
            ext_word_coherence: word_coh[1].finish(),
            grd_word_coherence: word_coh[2].finish(),
            question_score: mean(&questions),
            n_words: mean(&words),
        })
    }
}
