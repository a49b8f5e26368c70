//! Token-level Markov chain baseline.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use super::{detokenize, Bot, BotError};
use crate::domain::Conversation;
use crate::embeddings::tokenize;

pub const MAX_GENERATED_TOKENS: usize = 30;

/// The fixed reply a degraded Markov bot falls back to.
pub const DEGRADED_UTTERANCE: &str = "i don't know.";

/// A continuation symbol. `End` orders before every word, so argmax ties resolve to it first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Next {
    End,
    Word(String),
}

/// Context of the last `order` positions; `None` pads positions before the utterance start.
pub type Context = Vec<Option<String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    order: usize,
    transitions: BTreeMap<Context, BTreeMap<Next, u64>>,
    start_counts: BTreeMap<String, u64>,
}

pub fn train_markov<I, S>(utterances: I, order: usize) -> Result<MarkovModel, BotError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if order == 0 {
        return Err(BotError::InvalidOrder);
    }
    let mut model = MarkovModel {
        order,
        transitions: BTreeMap::new(),
        start_counts: BTreeMap::new(),
    };
    for text in utterances {
        let tokens = tokenize(text.as_ref());
        let Some(first) = tokens.first() else { continue };
        *model.start_counts.entry(first.clone()).or_default() += 1;
        let mut history: Vec<Option<String>> = vec![None; order];
        history.extend(tokens.iter().cloned().map(Some));
        for i in 1..=tokens.len() {
            let context = history[i..i + order].to_vec();
            let next = tokens.get(i).map_or(Next::End, |t| Next::Word(t.clone()));
            *model.transitions.entry(context).or_default().entry(next).or_default() += 1;
        }
    }
    if model.start_counts.is_empty() {
        return Err(BotError::EmptyCorpus);
    }
    Ok(model)
}

fn pick<'a, K: Ord>(counts: &'a BTreeMap<K, u64>, temperature: f64, rng: &mut dyn RngCore) -> &'a K {
    if temperature == 0.0 {
        let mut best: Option<(&K, u64)> = None;
        for (k, &c) in counts {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((k, c));
            }
        }
        return best.expect("non-empty counts").0;
    }
    let weights: Vec<f64> = counts.values().map(|&c| (c as f64).powf(1.0 / temperature)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for ((k, _), w) in counts.iter().zip(&weights) {
        if u < *w {
            return k;
        }
        u -= w;
    }
    counts.keys().next_back().expect("non-empty counts")
}

impl MarkovModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn start_counts(&self) -> &BTreeMap<String, u64> {
        &self.start_counts
    }

    pub fn transitions(&self) -> &BTreeMap<Context, BTreeMap<Next, u64>> {
        &self.transitions
    }

    /// Counts following the given word context (unpadded, most recent last).
    pub fn continuations(&self, context: &[&str]) -> Option<&BTreeMap<Next, u64>> {
        let key: Context = context.iter().map(|t| Some(t.to_string())).collect();
        self.transitions.get(&key)
    }

    /// Samples an utterance as a token list. Temperature 0 takes the most frequent continuation.
    pub fn generate(&self, temperature: f64, rng: &mut dyn RngCore) -> Vec<String> {
        let first = pick(&self.start_counts, temperature, rng).clone();
        let mut history: Vec<Option<String>> = vec![None; self.order];
        history.push(Some(first));
        while history.len() - self.order < MAX_GENERATED_TOKENS {
            let context = &history[history.len() - self.order..];
            let Some(counts) = self.transitions.get(context) else { break };
            match pick(counts, temperature, rng) {
                Next::End => break,
                Next::Word(w) => history.push(Some(w.clone())),
            }
        }
        history.into_iter().flatten().collect()
    }
}

/// Markov bot that ignores the history. With probability `degrade` it answers
/// [`DEGRADED_UTTERANCE`] instead of sampling.
#[derive(Debug, Clone)]
pub struct MarkovBot {
    pub model: MarkovModel,
    pub degrade: f64,
}

impl MarkovBot {
    pub fn new(model: MarkovModel) -> Self {
        MarkovBot { model, degrade: 0.0 }
    }

    pub fn with_degrade(mut self, degrade: f64) -> Self {
        self.degrade = degrade.clamp(0.0, 1.0);
        self
    }
}

impl Bot for MarkovBot {
    fn respond(&self, _history: &Conversation, temperature: f64, rng: &mut dyn RngCore) -> Result<String, BotError> {
        let u: f64 = rng.gen();
        if u < self.degrade {
            return Ok(DEGRADED_UTTERANCE.to_string());
        }
        Ok(detokenize(&self.model.generate(temperature, rng)))
    }
}
