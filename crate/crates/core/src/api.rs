//! HTTP + JSON surface.
//!
//! | code | status |
//! |------|--------|
//! | `EmptyField`, `InvalidField`, `InvalidBody`, `UnknownProvider`, `OutOfRange`, `EmptyMessage`, `MessageTooLong`, `NotFlaggable`, `UnregisteredEventType`, `MissingPayloadKey` | 400 |
//! | `ProviderNotAllowed` | 403 |
//! | `UnknownExperiment`, `UnknownSession`, `UnknownMessage` | 404 |
//! | `GenerationPending`, `AlreadyEnded`, `NoPendingUserMessage` | 409 |
//! | `SessionEnded` | 410 |
//! | `UpstreamError`, `UpstreamTimeout` | 502 |
//! | anything else (journal I/O, internal) | 500 |

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tracing::error;

use crate::conversation::{Flag, Message};
use crate::eventlog::ClientEvent;
use crate::export::ExportFilter;
use crate::platform::{Platform, ServiceError};
use crate::providers::ProviderDescriptor;
use crate::session::{EffectiveSettings, Session, SessionId, SettingsPatch};

/// HTTP status for an error code.
pub fn http_status(code: &str) -> StatusCode {
    match code {
        "EmptyField"
        | "InvalidField"
        | "InvalidBody"
        | "UnknownProvider"
        | "OutOfRange"
        | "EmptyMessage"
        | "MessageTooLong"
        | "NotFlaggable"
        | "UnregisteredEventType"
        | "MissingPayloadKey" => StatusCode::BAD_REQUEST,
        "ProviderNotAllowed" => StatusCode::FORBIDDEN,
        "UnknownExperiment" | "UnknownSession" | "UnknownMessage" => StatusCode::NOT_FOUND,
        "GenerationPending" | "AlreadyEnded" | "NoPendingUserMessage" => StatusCode::CONFLICT,
        "SessionEnded" => StatusCode::GONE,
        "UpstreamError" | "UpstreamTimeout" => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// Error body: `{"code", "message"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub http_status: u16,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_owned(),
            message: message.into(),
            http_status: http_status(code).as_u16(),
        }
    }

    fn invalid_body(message: impl Into<String>) -> Self {
        Self::new("InvalidBody", message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let api = ApiError::new(e.code(), e.to_string());
        if api.http_status >= 500 && api.http_status != 502 {
            error!(code = %api.code, "{}", api.message);
        }
        api
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::invalid_body(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::invalid_body(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs a journaling operation off the async workers; appends `fsync`.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new("Internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
pub struct CreateSessionBody {
    #[serde(default)]
    pub username: String,
    #[serde(default)]
    pub experiment_code: String,
    #[serde(default)]
    pub client_clock_ms: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: SessionId,
    pub settings: EffectiveSettings,
    pub providers: Vec<ProviderDescriptor>,
}

#[derive(Debug, Deserialize)]
pub struct MessageBody {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SettingsResponse {
    pub settings: EffectiveSettings,
}

#[derive(Debug, Deserialize)]
pub struct FlagBody {
    pub message_id: String,
    pub flag: Flag,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageResponse {
    pub message: Message,
}

#[derive(Debug, Deserialize)]
pub struct EventsBody {
    pub events: Vec<ClientEvent>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EventsResponse {
    pub server_seqs: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session: Session,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionStateResponse {
    pub session: Session,
    pub messages: Vec<Message>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub journal_seq: u64,
}

async fn create_session(
    State(platform): State<Arc<Platform>>,
    body: Result<Json<CreateSessionBody>, JsonRejection>,
) -> ApiResult<CreateSessionResponse> {
    let Json(body) = body?;
    let p = Arc::clone(&platform);
    let session = blocking(move || {
        p.create_session(&body.username, &body.experiment_code, body.client_clock_ms)
    })
    .await?;
    Ok(Json(CreateSessionResponse {
        providers: platform.providers_for(&session.experiment_code),
        session_id: session.id,
        settings: session.settings,
    }))
}

async fn get_session(
    State(platform): State<Arc<Platform>>,
    Path(id): Path<String>,
) -> ApiResult<SessionStateResponse> {
    let entry = platform.session(&SessionId::from(id))?;
    Ok(Json(SessionStateResponse {
        session: entry.session,
        messages: entry.conversation.messages,
    }))
}

async fn send_message(
    State(platform): State<Arc<Platform>>,
    Path(id): Path<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> ApiResult<crate::platform::Exchange> {
    let Json(body) = body?;
    let exchange = platform
        .send_message(&SessionId::from(id), &body.text)
        .await?;
    Ok(Json(exchange))
}

async fn update_settings(
    State(platform): State<Arc<Platform>>,
    Path(id): Path<String>,
    body: Result<Json<SettingsPatch>, JsonRejection>,
) -> ApiResult<SettingsResponse> {
    let Json(patch) = body?;
    let settings = blocking(move || platform.update_settings(&SessionId::from(id), &patch)).await?;
    Ok(Json(SettingsResponse { settings }))
}

async fn set_flag(
    State(platform): State<Arc<Platform>>,
    Path(id): Path<String>,
    body: Result<Json<FlagBody>, JsonRejection>,
) -> ApiResult<MessageResponse> {
    let Json(body) = body?;
    let message =
        blocking(move || platform.set_flag(&SessionId::from(id), &body.message_id, body.flag))
            .await?;
    Ok(Json(MessageResponse { message }))
}

async fn ingest_events(
    State(platform): State<Arc<Platform>>,
    Path(id): Path<String>,
    body: Result<Json<EventsBody>, JsonRejection>,
) -> ApiResult<EventsResponse> {
    let Json(body) = body?;
    let server_seqs =
        blocking(move || platform.ingest_client_events(&SessionId::from(id), body.events)).await?;
    Ok(Json(EventsResponse { server_seqs }))
}

async fn end_session(
    State(platform): State<Arc<Platform>>,
    Path(id): Path<String>,
) -> ApiResult<SessionResponse> {
    let session = blocking(move || platform.end_session(&SessionId::from(id))).await?;
    Ok(Json(SessionResponse { session }))
}

async fn export(
    State(platform): State<Arc<Platform>>,
    query: Result<Query<ExportFilter>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(filter) = query?;
    let bundle = blocking(move || Ok(platform.export(&filter))).await?;
    Ok(Json(bundle).into_response())
}

async fn health(State(platform): State<Arc<Platform>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        journal_seq: platform.journal_seq(),
    })
}

fn cors(platform: &Platform) -> CorsLayer {
    let origin = match platform
        .config()
        .defaults
        .ui_origin
        .as_deref()
        .and_then(|o| HeaderValue::from_str(o).ok())
    {
        Some(origin) => AllowOrigin::exact(origin),
        None => AllowOrigin::any(),
    };
    CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE])
}

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/export", get(export))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session))
        .route("/api/session/{id}/message", post(send_message))
        .route("/api/session/{id}/settings", post(update_settings))
        .route("/api/session/{id}/flag", post(set_flag))
        .route("/api/session/{id}/events", post(ingest_events))
        .route("/api/session/{id}/end", post(end_session))
        .layer(cors(&platform))
        .with_state(platform)
}

/// Serves until `shutdown` resolves. New connections are refused once
/// shutdown starts; in-flight requests finish.
pub async fn serve(
    platform: Arc<Platform>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(platform))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and returns the listener with the address actually bound.
pub async fn bind(addr: &str) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}
