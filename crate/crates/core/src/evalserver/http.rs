//! REST front end for [`EvalService`].

use std::io;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use super::{EvalError, EvalService, Session, SessionState};
use crate::domain::{BotId, RatingRecord, Vote};
use crate::net::RunningServer;

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Directory served at `/` for the web client.
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub bot_id: Option<String>,
    pub annotator_id: String,
}

#[derive(Debug, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageReply {
    pub reply: String,
    pub index: usize,
}

#[derive(Debug, Deserialize)]
pub struct VoteRequest {
    pub index: usize,
    pub direction: Vote,
}

#[derive(Debug, Deserialize)]
pub struct RatingRequest {
    pub quality: i64,
    pub fluency: i64,
    pub diversity: i64,
    pub relatedness: i64,
    pub empathy: i64,
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub bot_id: BotId,
    pub annotator_id: String,
    pub state: SessionState,
    pub pending: bool,
    pub bot_turns: usize,
    pub can_rate: bool,
    pub conversation: crate::domain::Conversation,
}

impl From<Session> for SessionView {
    fn from(s: Session) -> Self {
        let bot_turns = s.conversation.bot_turns();
        SessionView {
            session_id: s.id,
            bot_id: s.bot_id,
            annotator_id: s.annotator_id,
            can_rate: s.state == SessionState::Open && bot_turns >= super::MIN_BOT_TURNS,
            state: s.state,
            pending: s.pending,
            bot_turns,
            conversation: s.conversation,
        }
    }
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.2, "code": self.1}))).into_response()
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let status = match &e {
            EvalError::UnknownBot(_) | EvalError::UnknownSession(_) => StatusCode::NOT_FOUND,
            EvalError::EmptyMessage => StatusCode::BAD_REQUEST,
            EvalError::SessionClosed | EvalError::PendingReply | EvalError::TooFewTurns(_) => StatusCode::CONFLICT,
            EvalError::OutOfRange { .. } | EvalError::NotABotUtterance(_) | EvalError::UnknownIndex(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            EvalError::BotUnavailable(_) | EvalError::NoBots => StatusCode::SERVICE_UNAVAILABLE,
            EvalError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, "invalid_request", e.body_text())
    }
}

type App = Arc<EvalService>;

async fn blocking<T, F>(service: App, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&EvalService) -> Result<T, EvalError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn list_bots(State(app): State<App>) -> Json<Vec<String>> {
    Json(app.bots().map(|b| b.to_string()).collect())
}

async fn create_session(
    State(app): State<App>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    let session = blocking(app, move |s| s.create_session(req.bot_id.as_deref(), &req.annotator_id)).await?;
    Ok((StatusCode::CREATED, Json(session.into())))
}

async fn get_session(State(app): State<App>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(blocking(app, move |s| s.get_session(&id)).await?.into()))
}

async fn post_message(
    State(app): State<App>,
    Path(id): Path<String>,
    body: Result<Json<MessageRequest>, JsonRejection>,
) -> Result<Json<MessageReply>, ApiError> {
    let Json(req) = body?;
    let (reply, index) = blocking(app, move |s| s.post_message(&id, &req.text)).await?;
    Ok(Json(MessageReply { reply, index }))
}

async fn vote(
    State(app): State<App>,
    Path(id): Path<String>,
    body: Result<Json<VoteRequest>, JsonRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let Json(req) = body?;
    blocking(app, move |s| s.vote(&id, req.index, req.direction)).await?;
    Ok(Json(json!({"index": req.index, "direction": req.direction})))
}

async fn rate(
    State(app): State<App>,
    Path(id): Path<String>,
    body: Result<Json<RatingRequest>, JsonRejection>,
) -> Result<Json<RatingRecord>, ApiError> {
    let Json(r) = body?;
    let scores = [r.quality, r.fluency, r.diversity, r.relatedness, r.empathy];
    Ok(Json(blocking(app, move |s| s.submit_rating(&id, scores)).await?))
}

async fn abandon(State(app): State<App>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    blocking(app, move |s| s.abandon(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

fn ndjson(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn export_conversations(State(app): State<App>) -> Result<Response, ApiError> {
    Ok(ndjson(blocking(app, |s| Ok(s.export_conversations())).await?))
}

async fn export_ratings(State(app): State<App>) -> Result<Response, ApiError> {
    Ok(ndjson(blocking(app, |s| Ok(s.export_ratings())).await?))
}

pub fn router(service: Arc<EvalService>, options: &ServerOptions) -> Router {
    let api = Router::new()
        .route("/bots", get(list_bots))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/votes", post(vote))
        .route("/sessions/{id}/rating", post(rate))
        .route("/sessions/{id}/abandon", post(abandon))
        .route("/export/conversations", get(export_conversations))
        .route("/export/ratings", get(export_ratings))
        .with_state(service);
    match &options.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub fn serve(service: Arc<EvalService>, listener: TcpListener, options: &ServerOptions) -> io::Result<RunningServer> {
    RunningServer::start(listener, router(service, options))
}
