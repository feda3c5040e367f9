//! JSON-over-HTTP front end for [`Store`].
//!
//! | method | path                          | body / query           |
//! |--------|-------------------------------|------------------------|
//! | GET    | `/api/health`                 |                        |
//! | GET    | `/api/round/{r}/next`         | `?annotator=ID`        |
//! | POST   | `/api/vote`                   | [`VoteRequest`]        |
//! | GET    | `/api/round/{r}/progress`     |                        |
//! | GET    | `/api/round/{r}/export`       | `?partial=true`        |
//! | GET    | `/api/leaderboard`            |                        |

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{Clock, ExportSummary, Leaderboard, NextPair, Progress, ServiceError, Store, VoteAck, VoteRequest, API_SCHEMA_VERSION};

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<Store>>,
    clock: Arc<dyn Clock>,
}

impl AppState {
    pub fn new(store: Store, clock: Arc<dyn Clock>) -> Self {
        Self {
            store: Arc::new(Mutex::new(store)),
            clock,
        }
    }

    pub fn store(&self) -> MutexGuard<'_, Store> {
        // A panic while holding the lock cannot leave the store half-written:
        // every mutation is a journal append followed by an in-memory update.
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub missing: Option<usize>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: String) -> Self {
        Self {
            status,
            body: ErrorBody {
                schema_version: API_SCHEMA_VERSION,
                error: kind.into(),
                message,
                missing: None,
            },
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let message = e.to_string();
        match e {
            ServiceError::UnknownRound(_) | ServiceError::UnknownTask(_) => Self::new(StatusCode::NOT_FOUND, "not_found", message),
            ServiceError::Conflict { .. } | ServiceError::RoundExists(_) => Self::new(StatusCode::CONFLICT, "conflict", message),
            ServiceError::Incomplete { missing, .. } => {
                let mut err = Self::new(StatusCode::CONFLICT, "incomplete", message);
                err.body.missing = Some(missing);
                err
            }
            ServiceError::BadTask(_) => Self::new(StatusCode::BAD_REQUEST, "bad_request", message),
            ServiceError::Corrupt { .. } | ServiceError::Env(_) | ServiceError::Elo(_) | ServiceError::Io(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    partial: bool,
}

#[derive(Debug, Serialize)]
struct Health {
    schema_version: u32,
    status: &'static str,
    rounds: Vec<u32>,
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        schema_version: API_SCHEMA_VERSION,
        status: "ok",
        rounds: s.store().rounds(),
    })
}

async fn next(State(s): State<AppState>, Path(round): Path<u32>, Query(q): Query<NextQuery>) -> ApiResult<NextPair> {
    let annotator = q
        .annotator
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "annotator is required".into()))?;
    let now = s.clock.now_ms();
    let mut store = s.store();
    store.ensure_round(round)?;
    Ok(Json(store.next_pair(round, &annotator, now)?))
}

async fn vote(State(s): State<AppState>, body: std::result::Result<Json<VoteRequest>, JsonRejection>) -> ApiResult<VoteAck> {
    let Json(req) = body?;
    if req.annotator_id.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            "annotator_id is required".into(),
        ));
    }
    let now = s.clock.now_ms();
    Ok(Json(s.store().submit_vote(&req, now)?))
}

async fn progress(State(s): State<AppState>, Path(round): Path<u32>) -> ApiResult<Progress> {
    let mut store = s.store();
    store.ensure_round(round)?;
    Ok(Json(store.progress(round)?))
}

async fn export(State(s): State<AppState>, Path(round): Path<u32>, Query(q): Query<ExportQuery>) -> ApiResult<ExportSummary> {
    let mut store = s.store();
    store.ensure_round(round)?;
    Ok(Json(store.export(round, q.partial)?))
}

async fn leaderboard(State(s): State<AppState>) -> ApiResult<Leaderboard> {
    Ok(Json(s.store().leaderboard()?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/round/{round}/next", get(next))
        .route("/api/round/{round}/progress", get(progress))
        .route("/api/round/{round}/export", get(export))
        .route("/api/vote", post(vote))
        .route("/api/leaderboard", get(leaderboard))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
