//! Nearest-context retrieval baseline.

use std::sync::Arc;

use rand::RngCore;

use super::{Bot, BotError};
use crate::corpus::Corpus;
use crate::domain::Conversation;
use crate::embeddings::{tokenize, WordVectorTable};
use crate::metrics::{cosine, embedding_average};

/// Answers with the stored response whose context is closest (embedding average) to the last utterance.
#[derive(Debug, Clone)]
pub struct RetrievalBot {
    table: Arc<WordVectorTable>,
    entries: Vec<(Vec<f64>, String)>,
}

impl RetrievalBot {
    /// Contexts without a usable average vector are skipped.
    pub fn new<I, S, T>(pairs: I, table: Arc<WordVectorTable>) -> Result<Self, BotError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: Into<String>,
    {
        let entries: Vec<(Vec<f64>, String)> = pairs
            .into_iter()
            .filter_map(|(context, response)| {
                let v = embedding_average(&tokenize(context.as_ref()), &table).ok()?;
                Some((v, response.into()))
            })
            .collect();
        if entries.is_empty() {
            return Err(BotError::EmptyCorpus);
        }
        Ok(RetrievalBot { table, entries })
    }

    /// Every adjacent utterance pair of the corpus, in corpus order.
    pub fn from_corpus(corpus: &Corpus, table: Arc<WordVectorTable>) -> Result<Self, BotError> {
        let pairs = corpus.conversations().iter().flat_map(|c| {
            let u = c.utterances();
            (1..u.len()).map(move |i| (u[i - 1].text.clone(), u[i].text.clone()))
        });
        Self::new(pairs, table)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn retrieve(&self, query: &str) -> Result<&str, BotError> {
        let q = embedding_average(&tokenize(query), &self.table).map_err(|_| BotError::NoVectorTokens)?;
        let mut best: Option<(f64, &str)> = None;
        for (v, response) in &self.entries {
            let Ok(score) = cosine(&q, v) else { continue };
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, response));
            }
        }
        best.map(|(_, r)| r).ok_or(BotError::NoVectorTokens)
    }
}

impl Bot for RetrievalBot {
    fn respond(&self, history: &Conversation, _temperature: f64, _rng: &mut dyn RngCore) -> Result<String, BotError> {
        let last = history.last().ok_or(BotError::EmptyHistory)?;
        self.retrieve(&last.text).map(str::to_string)
    }
}
