//! Bots, the JSON wire protocol they speak, and builtin baselines.

pub mod markov;
pub mod retrieval;
pub mod server;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use markov::{train_markov, MarkovBot, MarkovModel, Next, DEGRADED_UTTERANCE, MAX_GENERATED_TOKENS};
pub use retrieval::RetrievalBot;
pub use server::{serve_bot, BotServerConfig};

use crate::domain::{BotId, Conversation, Origin, Speaker};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BotError {
    #[error("bot timed out")]
    Timeout,
    #[error("bot unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("history is empty")]
    EmptyHistory,
    #[error("no token of the query has a word vector")]
    NoVectorTokens,
    #[error("corpus has no usable utterances")]
    EmptyCorpus,
    #[error("markov order must be at least 1")]
    InvalidOrder,
}

/// A dialog agent. Implementations are stateless between calls; all randomness comes from `rng`.
pub trait Bot: Send + Sync {
    fn respond(&self, history: &Conversation, temperature: f64, rng: &mut dyn RngCore) -> Result<String, BotError>;
}

/// Repeats the last utterance.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoBot;

impl Bot for EchoBot {
    fn respond(&self, history: &Conversation, _temperature: f64, _rng: &mut dyn RngCore) -> Result<String, BotError> {
        history.last().map(|u| u.text.clone()).ok_or(BotError::EmptyHistory)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireUtterance {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondRequest {
    pub utterances: Vec<WireUtterance>,
    pub temperature: f64,
}

impl RespondRequest {
    pub fn from_history(history: &Conversation, temperature: f64) -> Self {
        RespondRequest {
            utterances: history
                .utterances()
                .iter()
                .map(|u| WireUtterance {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
            temperature,
        }
    }

    /// Rebuilds the history; fails on empty or non-alternating input.
    pub fn to_history(&self, bot_id: &BotId) -> Result<Conversation, BotError> {
        if self.utterances.is_empty() {
            return Err(BotError::EmptyHistory);
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BotError::Protocol("temperature must be a finite number >= 0".into()));
        }
        Conversation::from_turns(
            "request",
            bot_id.clone(),
            Origin::Interactive,
            self.utterances.iter().map(|u| (u.speaker, u.text.clone())),
        )
        .map_err(|e| BotError::Protocol(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RespondReply {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BotInfo {
    pub name: String,
    pub dataset: String,
    pub variant: String,
}

impl From<&BotId> for BotInfo {
    fn from(id: &BotId) -> Self {
        BotInfo {
            name: id.name.clone(),
            dataset: id.dataset.clone(),
            variant: id.variant.clone(),
        }
    }
}

impl From<BotInfo> for BotId {
    fn from(info: BotInfo) -> Self {
        BotId::new(info.name, info.dataset, info.variant)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireError {
    pub error: String,
}

#[derive(Clone)]
pub enum Transport {
    InProcess(Arc<dyn Bot>),
    Remote { base_url: String, agent: ureq::Agent },
}

impl fmt::Debug for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::InProcess(_) => f.write_str("InProcess"),
            Transport::Remote { base_url, .. } => write!(f, "Remote({base_url})"),
        }
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn map_transport_error(e: ureq::Error) -> BotError {
    match e {
        ureq::Error::Timeout(_) => BotError::Timeout,
        ureq::Error::Json(e) => BotError::Protocol(e.to_string()),
        other => BotError::Unavailable(other.to_string()),
    }
}

/// A bot plus how to reach it.
#[derive(Debug, Clone)]
pub struct BotHandle {
    pub bot_id: BotId,
    pub transport: Transport,
    pub temperature: f64,
    pub timeout: Duration,
}

impl BotHandle {
    pub fn in_process(bot_id: BotId, bot: Arc<dyn Bot>) -> Self {
        BotHandle {
            bot_id,
            transport: Transport::InProcess(bot),
            temperature: 1.0,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn remote(bot_id: BotId, base_url: &str, timeout: Duration) -> Self {
        BotHandle {
            bot_id,
            transport: Transport::Remote {
                base_url: base_url.trim_end_matches('/').to_string(),
                agent: agent(timeout),
            },
            temperature: 1.0,
            timeout,
        }
    }

    /// Connects to a bot server and takes its identity from `GET /info`.
    pub fn connect(base_url: &str, timeout: Duration) -> Result<Self, BotError> {
        let base_url = base_url.trim_end_matches('/');
        let mut resp = agent(timeout).get(&format!("{base_url}/info")).call().map_err(map_transport_error)?;
        if !resp.status().is_success() {
            return Err(BotError::Unavailable(format!("GET /info returned {}", resp.status())));
        }
        let info: BotInfo = resp.body_mut().read_json().map_err(|e| BotError::Protocol(e.to_string()))?;
        Ok(Self::remote(info.into(), base_url, timeout))
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn respond(&self, history: &Conversation, rng: &mut dyn RngCore) -> Result<String, BotError> {
        if history.is_empty() {
            return Err(BotError::EmptyHistory);
        }
        match &self.transport {
            Transport::InProcess(bot) => bot.respond(history, self.temperature, rng),
            Transport::Remote { base_url, agent } => {
                let request = RespondRequest::from_history(history, self.temperature);
                let mut resp = agent
                    .post(&format!("{base_url}/respond"))
                    .send_json(&request)
                    .map_err(map_transport_error)?;
                let status = resp.status().as_u16();
                if status != 200 {
                    let detail = resp
                        .body_mut()
                        .read_json::<WireError>()
                        .map(|b| b.error)
                        .unwrap_or_else(|_| format!("status {status}"));
                    return Err(match status {
                        504 => BotError::Timeout,
                        500..=599 => BotError::Unavailable(detail),
                        _ => BotError::Protocol(format!("status {status}: {detail}")),
                    });
                }
                let reply: RespondReply = resp.body_mut().read_json().map_err(|e| BotError::Protocol(e.to_string()))?;
                if reply.text.trim().is_empty() {
                    return Err(BotError::Protocol("empty reply text".into()));
                }
                Ok(reply.text)
            }
        }
    }
}

/// Joins tokens with spaces, attaching punctuation tokens to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !crate::embeddings::is_punctuation_token(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}
