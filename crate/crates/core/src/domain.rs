//! Conversation data model shared by every other module.
//!
//! A [`Conversation`] is a strictly alternating two-role exchange. Role `A`
//! is the opener (the human in interactive sessions, the opening side in
//! self-play); role `B` is the responding bot.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("utterance text is empty")]
    EmptyUtterance,
    #[error("speaker {0} cannot speak twice in a row")]
    AlternationViolation(Speaker),
    #[error("utterance index {0} is out of range")]
    UnknownIndex(usize),
    #[error("utterance {0} was not produced by the bot")]
    NotABotUtterance(usize),
    #[error("invalid bot id `{0}`, expected name@dataset/variant")]
    InvalidBotId(String),
    #[error("score {value} for {dimension} is outside 1..=7")]
    OutOfRange { dimension: &'static str, value: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::A => f.write_str("A"),
            Speaker::B => f.write_str("B"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(skip)]
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Interactive,
    Selfplay,
    Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Up,
    Down,
}

impl Vote {
    /// +1 for an upvote, -1 for a downvote.
    pub fn signum(self) -> f64 {
        match self {
            Vote::Up => 1.0,
            Vote::Down => -1.0,
        }
    }
}

/// Identity of a dialog agent, written `name@dataset/variant`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BotId {
    pub name: String,
    pub dataset: String,
    pub variant: String,
}

impl BotId {
    pub fn new(name: impl Into<String>, dataset: impl Into<String>, variant: impl Into<String>) -> Self {
        BotId {
            name: name.into(),
            dataset: dataset.into(),
            variant: variant.into(),
        }
    }
}

impl fmt::Display for BotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}/{}", self.name, self.dataset, self.variant)
    }
}

impl FromStr for BotId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DomainError::InvalidBotId(s.to_string());
        let (name, rest) = s.split_once('@').ok_or_else(bad)?;
        let (dataset, variant) = rest.split_once('/').ok_or_else(bad)?;
        if name.is_empty() || dataset.is_empty() || variant.is_empty() || variant.contains('/') {
            return Err(bad());
        }
        Ok(BotId::new(name, dataset, variant))
    }
}

impl Serialize for BotId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BotId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An ordered, strictly alternating exchange between two roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conversation {
    pub id: String,
    pub bot_id: BotId,
    pub origin: Origin,
    utterances: Vec<Utterance>,
    votes: BTreeMap<usize, Vote>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, bot_id: BotId, origin: Origin) -> Self {
        Conversation {
            id: id.into(),
            bot_id,
            origin,
            utterances: Vec::new(),
            votes: BTreeMap::new(),
        }
    }

    /// Builds a conversation from `(speaker, text)` pairs, validating every step.
    pub fn from_turns<I, S>(id: impl Into<String>, bot_id: BotId, origin: Origin, turns: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = (Speaker, S)>,
        S: Into<String>,
    {
        let mut conv = Conversation::new(id, bot_id, origin);
        for (speaker, text) in turns {
            conv = conv.append_utterance(speaker, text)?;
        }
        Ok(conv)
    }

    /// Builds an alternating conversation that opens with role A.
    pub fn from_texts<I, S>(id: impl Into<String>, bot_id: BotId, origin: Origin, texts: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut speaker = Speaker::A;
        let mut conv = Conversation::new(id, bot_id, origin);
        for text in texts {
            conv = conv.append_utterance(speaker, text)?;
            speaker = speaker.other();
        }
        Ok(conv)
    }

    pub fn append_utterance(mut self, speaker: Speaker, text: impl Into<String>) -> Result<Self, DomainError> {
        self.push(speaker, text)?;
        Ok(self)
    }

    pub(crate) fn push(&mut self, speaker: Speaker, text: impl Into<String>) -> Result<usize, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyUtterance);
        }
        if let Some(last) = self.utterances.last() {
            if last.speaker == speaker {
                return Err(DomainError::AlternationViolation(speaker));
            }
        }
        let index = self.utterances.len();
        self.utterances.push(Utterance { speaker, text, index });
        Ok(index)
    }

    /// Records a vote on a bot utterance; the latest vote per index wins.
    pub fn with_vote(mut self, index: usize, vote: Vote) -> Result<Self, DomainError> {
        self.set_vote(index, vote)?;
        Ok(self)
    }

    pub(crate) fn set_vote(&mut self, index: usize, vote: Vote) -> Result<(), DomainError> {
        let utt = self.utterances.get(index).ok_or(DomainError::UnknownIndex(index))?;
        if utt.speaker != Speaker::B {
            return Err(DomainError::NotABotUtterance(index));
        }
        self.votes.insert(index, vote);
        Ok(())
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn votes(&self) -> &BTreeMap<usize, Vote> {
        &self.votes
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn last(&self) -> Option<&Utterance> {
        self.utterances.last()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.text.as_str())
    }

    /// Utterances spoken by role `speaker`, in order.
    pub fn by_speaker(&self, speaker: Speaker) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.speaker == speaker)
    }

    pub fn bot_turns(&self) -> usize {
        self.by_speaker(Speaker::B).count()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("conversation serializes")
    }
}

/// All role-A utterances in order.
pub fn user_utterances(conversation: &Conversation) -> Vec<&Utterance> {
    conversation.by_speaker(Speaker::A).collect()
}

#[derive(Deserialize)]
struct RawUtterance {
    speaker: Speaker,
    text: String,
}

#[derive(Deserialize)]
struct RawConversation {
    id: String,
    bot_id: BotId,
    origin: Origin,
    utterances: Vec<RawUtterance>,
    #[serde(default)]
    votes: BTreeMap<usize, Vote>,
}

impl<'de> Deserialize<'de> for Conversation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawConversation::deserialize(deserializer)?;
        let mut conv = Conversation::from_turns(
            raw.id,
            raw.bot_id,
            raw.origin,
            raw.utterances.into_iter().map(|u| (u.speaker, u.text)),
        )
        .map_err(serde::de::Error::custom)?;
        for (index, vote) in raw.votes {
            conv.set_vote(index, vote).map_err(serde::de::Error::custom)?;
        }
        Ok(conv)
    }
}

/// One annotator's 7-point Likert scores for one conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LikertScores {
    pub quality: u8,
    pub fluency: u8,
    pub diversity: u8,
    pub relatedness: u8,
    pub empathy: u8,
}

pub const RATING_DIMENSIONS: [&str; 5] = ["quality", "fluency", "diversity", "relatedness", "empathy"];

impl LikertScores {
    pub fn new(quality: i64, fluency: i64, diversity: i64, relatedness: i64, empathy: i64) -> Result<Self, DomainError> {
        let check = |dimension: &'static str, value: i64| {
            if (1..=7).contains(&value) {
                Ok(value as u8)
            } else {
                Err(DomainError::OutOfRange { dimension, value })
            }
        };
        Ok(LikertScores {
            quality: check("quality", quality)?,
            fluency: check("fluency", fluency)?,
            diversity: check("diversity", diversity)?,
            relatedness: check("relatedness", relatedness)?,
            empathy: check("empathy", empathy)?,
        })
    }

    pub fn as_array(&self) -> [u8; 5] {
        [self.quality, self.fluency, self.diversity, self.relatedness, self.empathy]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RatingRecord {
    pub conversation_id: String,
    pub annotator_id: String,
    #[serde(flatten)]
    pub scores: LikertScores,
}

impl RatingRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("rating serializes")
    }
}

#[derive(Deserialize)]
struct RawScores {
    quality: i64,
    fluency: i64,
    diversity: i64,
    relatedness: i64,
    empathy: i64,
}

impl<'de> Deserialize<'de> for LikertScores {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawScores::deserialize(deserializer)?;
        LikertScores::new(raw.quality, raw.fluency, raw.diversity, raw.relatedness, raw.empathy).map_err(serde::de::Error::custom)
    }
}

#[derive(Deserialize)]
struct RawRating {
    conversation_id: String,
    annotator_id: String,
    #[serde(flatten)]
    scores: LikertScores,
}

impl<'de> Deserialize<'de> for RatingRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawRating::deserialize(deserializer)?;
        Ok(RatingRecord {
            conversation_id: raw.conversation_id,
            annotator_id: raw.annotator_id,
            scores: raw.scores,
        })
    }
}
