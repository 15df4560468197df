//! HTTP+JSON routes over a [`VttStore`].

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::{Composition, QuestionSet, RaterResponse, VttError, VttStore};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default = "default_count")]
    pub real: usize,
    #[serde(default = "default_count")]
    pub synthetic: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tumor: bool,
}

fn default_count() -> usize {
    50
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub items: usize,
}

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    #[serde(default)]
    pub partial: bool,
}

impl IntoResponse for VttError {
    fn into_response(self) -> Response {
        let status = match &self {
            VttError::UnknownSession(_) => StatusCode::NOT_FOUND,
            VttError::DeckExhausted | VttError::Duplicate(_) | VttError::Incomplete { .. } => StatusCode::CONFLICT,
            VttError::Invalid(_) => StatusCode::BAD_REQUEST,
            VttError::Corrupt { .. } | VttError::Io(_) | VttError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

async fn create(State(store): State<Arc<VttStore>>, Json(req): Json<CreateRequest>) -> Result<Json<Created>, VttError> {
    let counts = Composition {
        real: req.real,
        synthetic: req.synthetic,
    };
    let (session_id, items) = store.create(counts, QuestionSet { tumor: req.tumor }, req.seed)?;
    Ok(Json(Created { session_id, items }))
}

async fn next(State(store): State<Arc<VttStore>>, Path(id): Path<String>) -> Result<impl IntoResponse, VttError> {
    Ok(Json(store.next_trial(&id)?))
}

async fn respond(
    State(store): State<Arc<VttStore>>,
    Path(id): Path<String>,
    Json(resp): Json<RaterResponse>,
) -> Result<impl IntoResponse, VttError> {
    Ok(Json(store.record(&id, &resp)?))
}

async fn report(
    State(store): State<Arc<VttStore>>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> Result<impl IntoResponse, VttError> {
    Ok(Json(store.finalize(&id, q.partial)?))
}

pub fn router(store: Arc<VttStore>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/responses", post(respond))
        .route("/sessions/{id}/report", get(report))
        .with_state(store)
}
