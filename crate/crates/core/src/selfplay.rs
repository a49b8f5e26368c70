//! Bot-bot conversation generation, hybrid scoring and repetition analysis.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::botkit::{BotError, BotHandle};
use crate::corpus::Corpus;
use crate::domain::{BotId, Conversation, Origin, Speaker};
use crate::hybrid::{predict_quality, HybridModel};
use crate::metrics::{FeatureExtractor, MetricError, Pairing};

#[derive(Debug, Error)]
pub enum SelfPlayError {
    #[error("invalid self-play config: {0}")]
    InvalidConfig(String),
    #[error("bot unavailable: {0}")]
    BotUnavailable(String),
    #[error("bot timed out twice on conversation {0}")]
    BotTimeout(usize),
    #[error("bot broke the protocol: {0}")]
    Protocol(String),
    #[error("model was fit with {model} held out but conversation {conversation} is from {found}")]
    HeldOutMismatch {
        model: BotId,
        found: BotId,
        conversation: String,
    },
    #[error("need at least 2 conversations, got {0}")]
    InsufficientConversations(usize),
    #[error("window must be at least 1")]
    InvalidWindow,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("conversation {id}: {source}")]
    Metric {
        id: String,
        #[source]
        source: MetricError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayConfig {
    pub n_conversations: usize,
    pub turns: usize,
    pub seed: u64,
    pub opener_prompts: Vec<String>,
}

impl Default for SelfPlayConfig {
    fn default() -> Self {
        SelfPlayConfig {
            n_conversations: 100,
            turns: 10,
            seed: 0,
            opener_prompts: vec!["hi".into()],
        }
    }
}

impl SelfPlayConfig {
    pub fn validate(&self) -> Result<(), SelfPlayError> {
        if self.n_conversations < 1 {
            return Err(SelfPlayError::InvalidConfig("n_conversations must be >= 1".into()));
        }
        if self.turns < 2 {
            return Err(SelfPlayError::InvalidConfig("turns must be >= 2".into()));
        }
        if self.opener_prompts.iter().all(|p| p.trim().is_empty()) {
            return Err(SelfPlayError::InvalidConfig("need at least one non-blank opener prompt".into()));
        }
        Ok(())
    }

    /// The RNG for conversation `k`: the config seed on stream `k`.
    pub fn rng_for(&self, k: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        rng
    }
}

fn play_one(bot: &BotHandle, config: &SelfPlayConfig, openers: &[&str], k: usize) -> Result<Conversation, BotError> {
    let mut rng = config.rng_for(k);
    let opener = openers[rng.gen_range(0..openers.len())];
    let mut conv = Conversation::new(format!("selfplay-{}-{k:04}", config.seed), bot.bot_id.clone(), Origin::Selfplay);
    conv.push(Speaker::A, opener).map_err(|e| BotError::Protocol(e.to_string()))?;
    let mut speaker = Speaker::B;
    while conv.len() < config.turns {
        let text = bot.respond(&conv, &mut rng)?;
        conv.push(speaker, text).map_err(|e| BotError::Protocol(e.to_string()))?;
        speaker = speaker.other();
    }
    Ok(conv)
}

/// Generates `n_conversations` bot-bot conversations of exactly `turns` utterances each.
/// A conversation that times out is restarted once from its original stream.
pub fn run_selfplay(bot: &BotHandle, config: &SelfPlayConfig) -> Result<Vec<Conversation>, SelfPlayError> {
    config.validate()?;
    let openers: Vec<&str> = config.opener_prompts.iter().map(String::as_str).filter(|p| !p.trim().is_empty()).collect();
    (0..config.n_conversations)
        .into_par_iter()
        .map(|k| {
            let result = match play_one(bot, config, &openers, k) {
                Err(BotError::Timeout) => {
                    log::warn!("self-play conversation {k} timed out; retrying");
                    play_one(bot, config, &openers, k)
                }
                other => other,
            };
            result.map_err(|e| match e {
                BotError::Timeout => SelfPlayError::BotTimeout(k),
                BotError::Unavailable(m) => SelfPlayError::BotUnavailable(m),
                other => SelfPlayError::Protocol(other.to_string()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotScore {
    pub bot_id: BotId,
    pub mean_mh: f64,
    pub per_conversation_mh: Vec<f64>,
}

/// Scores conversations with a model that never saw this bot's human conversations.
pub fn score_selfplay(
    conversations: &[Conversation],
    model: &HybridModel,
    extractor: &FeatureExtractor,
) -> Result<BotScore, SelfPlayError> {
    let first = conversations.first().ok_or(SelfPlayError::InsufficientConversations(0))?;
    for c in conversations {
        if c.bot_id != model.held_out_bot {
            return Err(SelfPlayError::HeldOutMismatch {
                model: model.held_out_bot.clone(),
                found: c.bot_id.clone(),
                conversation: c.id.clone(),
            });
        }
    }
    let per_conversation_mh = conversations
        .par_iter()
        .map(|c| {
            extractor
                .conversation_features(c, Pairing::BotBot)
                .map(|f| predict_quality(model, &f))
                .map_err(|source| SelfPlayError::Metric { id: c.id.clone(), source })
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let mean_mh = per_conversation_mh.iter().sum::<f64>() / per_conversation_mh.len() as f64;
    Ok(BotScore {
        bot_id: first.bot_id.clone(),
        mean_mh,
        per_conversation_mh,
    })
}

fn normalized_texts(c: &Conversation) -> Vec<String> {
    c.texts().map(|t| t.split_whitespace().collect::<Vec<_>>().join(" ")).collect()
}

fn runs(texts: &[String], window: usize) -> HashSet<&[String]> {
    if texts.len() < window {
        return HashSet::new();
    }
    texts.windows(window).collect()
}

/// Percentage of unordered conversation pairs sharing a run of `window` identical consecutive utterances.
pub fn pairwise_overlap(conversations: &[Conversation], window: usize) -> Result<f64, SelfPlayError> {
    if window == 0 {
        return Err(SelfPlayError::InvalidWindow);
    }
    let n = conversations.len();
    if n < 2 {
        return Err(SelfPlayError::InsufficientConversations(n));
    }
    let texts: Vec<Vec<String>> = conversations.iter().map(normalized_texts).collect();
    let sets: Vec<HashSet<&[String]>> = texts.iter().map(|t| runs(t, window)).collect();
    let mut shared = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if sets[i].iter().any(|r| sets[j].contains(r)) {
                shared += 1;
            }
        }
    }
    Ok(100.0 * shared as f64 / (n * (n - 1) / 2) as f64)
}

/// Percentage of conversations containing a run of `window` consecutive utterances found verbatim in training.
pub fn training_overlap(conversations: &[Conversation], training: &Corpus, window: usize) -> Result<f64, SelfPlayError> {
    if window == 0 {
        return Err(SelfPlayError::InvalidWindow);
    }
    if training.is_empty() {
        return Err(SelfPlayError::EmptyCorpus);
    }
    if conversations.is_empty() {
        return Err(SelfPlayError::InsufficientConversations(0));
    }
    let train_texts: Vec<Vec<String>> = training.conversations().iter().map(normalized_texts).collect();
    let known: HashSet<&[String]> = train_texts.iter().flat_map(|t| runs(t, window)).collect();
    let hits = conversations
        .iter()
        .filter(|c| {
            let t = normalized_texts(c);
            runs(&t, window).iter().any(|r| known.contains(r))
        })
        .count();
    Ok(100.0 * hits as f64 / conversations.len() as f64)
}
