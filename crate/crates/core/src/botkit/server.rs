//! Serves any [`Bot`] over the JSON wire protocol.

use std::io;
use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Bot, BotError, BotInfo, RespondReply, RespondRequest, WireError, DEFAULT_TIMEOUT};
use crate::domain::BotId;
use crate::net::RunningServer;

#[derive(Debug, Clone)]
pub struct BotServerConfig {
    /// Longest a single reply may take before the server answers 504.
    pub timeout: Duration,
}

impl Default for BotServerConfig {
    fn default() -> Self {
        BotServerConfig { timeout: DEFAULT_TIMEOUT }
    }
}

struct AppState {
    bot: Arc<dyn Bot>,
    bot_id: BotId,
    config: BotServerConfig,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(WireError { error: message.into() })).into_response()
}

fn status_for(e: &BotError) -> StatusCode {
    match e {
        BotError::EmptyHistory | BotError::Protocol(_) => StatusCode::BAD_REQUEST,
        BotError::Timeout => StatusCode::GATEWAY_TIMEOUT,
        _ => StatusCode::SERVICE_UNAVAILABLE,
    }
}

/// The request's RNG seed: a hash of its canonical JSON, so identical requests get identical replies.
pub fn request_seed(request: &RespondRequest) -> u64 {
    let bytes = serde_json::to_vec(request).expect("request serializes");
    let digest = Sha256::digest(&bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

async fn info(State(state): State<Arc<AppState>>) -> Json<BotInfo> {
    Json(BotInfo::from(&state.bot_id))
}

async fn respond(State(state): State<Arc<AppState>>, body: Result<Json<RespondRequest>, JsonRejection>) -> Response {
    let Json(request) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let history = match request.to_history(&state.bot_id) {
        Ok(h) => h,
        Err(e) => return error(status_for(&e), e.to_string()),
    };
    let seed = request_seed(&request);
    let worker = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            state.bot.respond(&history, request.temperature, &mut rng)
        })
    };
    match tokio::time::timeout(state.config.timeout, worker).await {
        Err(_) => error(StatusCode::GATEWAY_TIMEOUT, "bot did not answer in time"),
        Ok(Err(join)) => error(StatusCode::SERVICE_UNAVAILABLE, format!("bot failed: {join}")),
        Ok(Ok(Err(e))) => error(status_for(&e), e.to_string()),
        Ok(Ok(Ok(text))) => Json(RespondReply { text }).into_response(),
    }
}

pub fn router(bot: Arc<dyn Bot>, bot_id: BotId, config: BotServerConfig) -> Router {
    let state = Arc::new(AppState { bot, bot_id, config });
    Router::new()
        .route("/info", get(info))
        .route("/respond", post(respond))
        .with_state(state)
}

pub fn serve_bot(bot: Arc<dyn Bot>, bot_id: BotId, listener: TcpListener, config: BotServerConfig) -> io::Result<RunningServer> {
    RunningServer::start(listener, router(bot, bot_id, config))
}
