//! Interactive human evaluation: chat sessions, votes and ratings over an
//! append-only event log.

pub mod http;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{router, serve, ServerOptions};

use crate::botkit::{BotError, BotHandle};
use crate::domain::{BotId, Conversation, DomainError, LikertScores, Origin, RatingRecord, Speaker, Vote};
use crate::io::{parse_jsonl, JsonlError};

/// Bot responses required before a session can be rated.
pub const MIN_BOT_TURNS: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown bot {0}")]
    UnknownBot(String),
    #[error("no bots are registered")]
    NoBots,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session is not open")]
    SessionClosed,
    #[error("message text is empty")]
    EmptyMessage,
    #[error("the previous message is still waiting for a reply; resend it to retry")]
    PendingReply,
    #[error("bot unavailable: {0}")]
    BotUnavailable(String),
    #[error("rating needs at least {MIN_BOT_TURNS} bot responses, session has {0}")]
    TooFewTurns(usize),
    #[error("{dimension} score {value} is outside 1..=7")]
    OutOfRange { dimension: &'static str, value: i64 },
    #[error("utterance {0} is not a bot utterance")]
    NotABotUtterance(usize),
    #[error("no utterance at index {0}")]
    UnknownIndex(usize),
    #[error("event store: {0}")]
    Store(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::UnknownBot(_) => "unknown_bot",
            EvalError::NoBots => "no_bots",
            EvalError::UnknownSession(_) => "unknown_session",
            EvalError::SessionClosed => "session_closed",
            EvalError::EmptyMessage => "empty_message",
            EvalError::PendingReply => "pending_reply",
            EvalError::BotUnavailable(_) => "bot_unavailable",
            EvalError::TooFewTurns(_) => "too_few_turns",
            EvalError::OutOfRange { .. } => "out_of_range",
            EvalError::NotABotUtterance(_) => "not_a_bot_utterance",
            EvalError::UnknownIndex(_) => "unknown_index",
            EvalError::Store(_) => "store_error",
        }
    }
}

impl From<DomainError> for EvalError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::EmptyUtterance => EvalError::EmptyMessage,
            DomainError::UnknownIndex(i) => EvalError::UnknownIndex(i),
            DomainError::NotABotUtterance(i) => EvalError::NotABotUtterance(i),
            DomainError::OutOfRange { dimension, value } => EvalError::OutOfRange { dimension, value },
            other => EvalError::Store(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Rated,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Session {
    pub id: String,
    pub bot_id: BotId,
    pub annotator_id: String,
    pub created_at: DateTime<Utc>,
    pub state: SessionState,
    pub conversation: Conversation,
    /// The last user message has no reply yet.
    pub pending: bool,
    pub rating: Option<RatingRecord>,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EvalRecord {
    SessionOpened {
        at: DateTime<Utc>,
        session_id: String,
        bot_id: BotId,
        annotator_id: String,
        /// Chosen by round-robin rather than requested.
        assigned: bool,
    },
    /// A user message and the bot reply; `reply` is absent while the bot was unavailable.
    MessagePair {
        at: DateTime<Utc>,
        session_id: String,
        user_text: String,
        reply: Option<String>,
    },
    Vote {
        at: DateTime<Utc>,
        session_id: String,
        index: usize,
        direction: Vote,
    },
    RatingSubmitted {
        at: DateTime<Utc>,
        session_id: String,
        annotator_id: String,
        #[serde(flatten)]
        scores: LikertScores,
    },
    SessionAbandoned {
        at: DateTime<Utc>,
        session_id: String,
    },
}

impl EvalRecord {
    pub fn session_id(&self) -> &str {
        match self {
            EvalRecord::SessionOpened { session_id, .. }
            | EvalRecord::MessagePair { session_id, .. }
            | EvalRecord::Vote { session_id, .. }
            | EvalRecord::RatingSubmitted { session_id, .. }
            | EvalRecord::SessionAbandoned { session_id, .. } => session_id,
        }
    }
}

/// Applies a non-opening event to its session. Events are validated before they are logged,
/// so this only fails on a corrupt log.
fn apply(session: &mut Session, event: &EvalRecord) -> Result<(), EvalError> {
    match event {
        EvalRecord::SessionOpened { .. } => return Err(EvalError::Store("duplicate session".into())),
        EvalRecord::MessagePair { user_text, reply, .. } => {
            if !session.pending {
                session.conversation.push(Speaker::A, user_text.clone())?;
            }
            match reply {
                Some(text) => {
                    session.conversation.push(Speaker::B, text.clone())?;
                    session.pending = false;
                }
                None => session.pending = true,
            }
        }
        EvalRecord::Vote { index, direction, .. } => session.conversation.set_vote(*index, *direction)?,
        EvalRecord::RatingSubmitted { annotator_id, scores, .. } => {
            session.state = SessionState::Rated;
            session.rating = Some(RatingRecord {
                conversation_id: session.id.clone(),
                annotator_id: annotator_id.clone(),
                scores: *scores,
            });
        }
        EvalRecord::SessionAbandoned { .. } => session.state = SessionState::Abandoned,
    }
    Ok(())
}

/// Append-only JSONL event log, also kept in memory.
struct EventStore {
    events: Vec<EvalRecord>,
    writer: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl EventStore {
    fn append(&mut self, event: EvalRecord) -> Result<(), EvalError> {
        if let Some(w) = self.writer.as_mut() {
            let line = serde_json::to_string(&event).map_err(|e| EvalError::Store(e.to_string()))?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| EvalError::Store(format!("{}: {e}", self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default())))?;
        }
        self.events.push(event);
        Ok(())
    }
}

struct Registry {
    order: Vec<String>,
    round_robin: usize,
}

/// The evaluation service. All methods are synchronous and safe to call from many threads;
/// calls on one session are serialized.
pub struct EvalService {
    bots: Vec<BotHandle>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    registry: Mutex<Registry>,
    store: Mutex<EventStore>,
}

fn session_rng(session_id: &str, bot_turns: usize) -> ChaCha8Rng {
    let digest = Sha256::digest(session_id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    rng.set_stream(bot_turns as u64);
    rng
}

impl EvalService {
    /// An in-memory service.
    pub fn new(bots: Vec<BotHandle>) -> Self {
        EvalService {
            bots,
            sessions: RwLock::new(HashMap::new()),
            registry: Mutex::new(Registry {
                order: Vec::new(),
                round_robin: 0,
            }),
            store: Mutex::new(EventStore {
                events: Vec::new(),
                writer: None,
                path: None,
            }),
        }
    }

    /// A service persisted at `path`, replaying any events already there.
    pub fn open(bots: Vec<BotHandle>, path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let events = if path.exists() { read_events(path)? } else { Vec::new() };
        let service = Self::replay(bots, events)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| EvalError::Store(format!("{}: {e}", path.display())))?;
        {
            let mut store = service.store.lock().expect("store lock");
            store.writer = Some(BufWriter::new(file));
            store.path = Some(path.to_path_buf());
        }
        Ok(service)
    }

    /// Rebuilds an in-memory service from an event log.
    pub fn replay(bots: Vec<BotHandle>, events: Vec<EvalRecord>) -> Result<Self, EvalError> {
        let service = Self::new(bots);
        {
            let mut sessions = service.sessions.write().expect("sessions lock");
            let mut registry = service.registry.lock().expect("registry lock");
            for event in &events {
                match event {
                    EvalRecord::SessionOpened {
                        at,
                        session_id,
                        bot_id,
                        annotator_id,
                        assigned,
                    } => {
                        if sessions.contains_key(session_id) {
                            return Err(EvalError::Store(format!("session {session_id} opened twice")));
                        }
                        if *assigned {
                            registry.round_robin += 1;
                        }
                        registry.order.push(session_id.clone());
                        sessions.insert(
                            session_id.clone(),
                            Arc::new(Mutex::new(new_session(session_id, bot_id, annotator_id, *at))),
                        );
                    }
                    other => {
                        let s = sessions
                            .get(other.session_id())
                            .ok_or_else(|| EvalError::Store(format!("event for unknown session {}", other.session_id())))?;
                        apply(&mut s.lock().expect("session lock"), other)?;
                    }
                }
            }
        }
        service.store.lock().expect("store lock").events = events;
        Ok(service)
    }

    pub fn bots(&self) -> impl Iterator<Item = &BotId> {
        self.bots.iter().map(|b| &b.bot_id)
    }

    pub fn events(&self) -> Vec<EvalRecord> {
        self.store.lock().expect("store lock").events.clone()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, EvalError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| EvalError::UnknownSession(id.to_string()))
    }

    fn commit(&self, session: &mut Session, event: EvalRecord) -> Result<(), EvalError> {
        self.store.lock().expect("store lock").append(event.clone())?;
        apply(session, &event)
    }

    pub fn create_session(&self, bot_id: Option<&str>, annotator_id: &str) -> Result<Session, EvalError> {
        let mut registry = self.registry.lock().expect("registry lock");
        let (bot, assigned) = match bot_id {
            Some(requested) => (
                self.bots
                    .iter()
                    .find(|b| b.bot_id.to_string() == requested)
                    .ok_or_else(|| EvalError::UnknownBot(requested.to_string()))?,
                false,
            ),
            None => {
                if self.bots.is_empty() {
                    return Err(EvalError::NoBots);
                }
                (&self.bots[registry.round_robin % self.bots.len()], true)
            }
        };
        let id = uuid::Uuid::new_v4().to_string();
        let at = Utc::now();
        self.store.lock().expect("store lock").append(EvalRecord::SessionOpened {
            at,
            session_id: id.clone(),
            bot_id: bot.bot_id.clone(),
            annotator_id: annotator_id.to_string(),
            assigned,
        })?;
        if assigned {
            registry.round_robin += 1;
        }
        registry.order.push(id.clone());
        let session = new_session(&id, &bot.bot_id, annotator_id, at);
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn get_session(&self, id: &str) -> Result<Session, EvalError> {
        Ok(self.session(id)?.lock().expect("session lock").clone())
    }

    /// Sends a user message and returns the bot reply with its utterance index.
    pub fn post_message(&self, session_id: &str, text: &str) -> Result<(String, usize), EvalError> {
        let handle = self.session(session_id)?;
        let mut session = handle.lock().expect("session lock");
        if session.state != SessionState::Open {
            return Err(EvalError::SessionClosed);
        }
        if text.trim().is_empty() {
            return Err(EvalError::EmptyMessage);
        }
        if session.pending && session.conversation.last().map(|u| u.text.as_str()) != Some(text) {
            return Err(EvalError::PendingReply);
        }
        let bot = self
            .bots
            .iter()
            .find(|b| b.bot_id == session.bot_id)
            .ok_or_else(|| EvalError::UnknownBot(session.bot_id.to_string()))?;

        let mut history = session.conversation.clone();
        if !session.pending {
            history.push(Speaker::A, text)?;
        }
        let mut rng = session_rng(&session.id, session.conversation.bot_turns());
        let reply = match bot.respond(&history, &mut rng) {
            Ok(r) if !r.trim().is_empty() => Ok(r),
            Ok(_) => Err(BotError::Protocol("empty reply".into())),
            Err(e) => Err(e),
        };
        match reply {
            Ok(reply) => {
                let event = EvalRecord::MessagePair {
                    at: Utc::now(),
                    session_id: session.id.clone(),
                    user_text: text.to_string(),
                    reply: Some(reply.clone()),
                };
                self.commit(&mut session, event)?;
                Ok((reply, session.conversation.len() - 1))
            }
            Err(e) => {
                if !session.pending {
                    let event = EvalRecord::MessagePair {
                        at: Utc::now(),
                        session_id: session.id.clone(),
                        user_text: text.to_string(),
                        reply: None,
                    };
                    self.commit(&mut session, event)?;
                }
                Err(EvalError::BotUnavailable(e.to_string()))
            }
        }
    }

    pub fn vote(&self, session_id: &str, index: usize, direction: Vote) -> Result<(), EvalError> {
        let handle = self.session(session_id)?;
        let mut session = handle.lock().expect("session lock");
        if session.state == SessionState::Abandoned {
            return Err(EvalError::SessionClosed);
        }
        session.conversation.clone().set_vote(index, direction)?;
        let event = EvalRecord::Vote {
            at: Utc::now(),
            session_id: session.id.clone(),
            index,
            direction,
        };
        self.commit(&mut session, event)
    }

    pub fn submit_rating(&self, session_id: &str, scores: [i64; 5]) -> Result<RatingRecord, EvalError> {
        let handle = self.session(session_id)?;
        let mut session = handle.lock().expect("session lock");
        if session.state != SessionState::Open {
            return Err(EvalError::SessionClosed);
        }
        let turns = session.conversation.bot_turns();
        if turns < MIN_BOT_TURNS {
            return Err(EvalError::TooFewTurns(turns));
        }
        let scores = LikertScores::new(scores[0], scores[1], scores[2], scores[3], scores[4])?;
        let event = EvalRecord::RatingSubmitted {
            at: Utc::now(),
            session_id: session.id.clone(),
            annotator_id: session.annotator_id.clone(),
            scores,
        };
        self.commit(&mut session, event)?;
        Ok(session.rating.clone().expect("rating just applied"))
    }

    pub fn abandon(&self, session_id: &str) -> Result<(), EvalError> {
        let handle = self.session(session_id)?;
        let mut session = handle.lock().expect("session lock");
        if session.state != SessionState::Open {
            return Err(EvalError::SessionClosed);
        }
        let event = EvalRecord::SessionAbandoned {
            at: Utc::now(),
            session_id: session.id.clone(),
        };
        self.commit(&mut session, event)
    }

    fn sessions_in_order(&self) -> Vec<Session> {
        let order = self.registry.lock().expect("registry lock").order.clone();
        let sessions = self.sessions.read().expect("sessions lock");
        order
            .iter()
            .filter_map(|id| sessions.get(id))
            .map(|s| s.lock().expect("session lock").clone())
            .collect()
    }

    /// Conversations with at least one utterance, one JSON line each, in session creation order.
    pub fn export_conversations(&self) -> String {
        self.sessions_in_order()
            .iter()
            .filter(|s| !s.conversation.is_empty())
            .map(|s| s.conversation.to_json_line() + "\n")
            .collect()
    }

    /// Submitted ratings, one JSON line each, in session creation order.
    pub fn export_ratings(&self) -> String {
        self.sessions_in_order()
            .iter()
            .filter_map(|s| s.rating.as_ref())
            .map(|r| r.to_json_line() + "\n")
            .collect()
    }
}

fn new_session(id: &str, bot_id: &BotId, annotator_id: &str, at: DateTime<Utc>) -> Session {
    Session {
        id: id.to_string(),
        bot_id: bot_id.clone(),
        annotator_id: annotator_id.to_string(),
        created_at: at,
        state: SessionState::Open,
        conversation: Conversation::new(id, bot_id.clone(), Origin::Interactive),
        pending: false,
        rating: None,
    }
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, EvalError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EvalError::Store(format!("{}: {e}", path.display())))?;
    parse_jsonl(BufReader::new(file), &path.display().to_string()).map_err(|e: JsonlError| EvalError::Store(e.to_string()))
}
