//! HTTP surface: /rank, /events, /health, and the prior debug endpoint.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Json, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crank_core::domain::{parse_event, Carousel, CarouselId, UserId};
use crank_core::engine::EngineError;
use crank_core::scoring::ScoringError;

use crate::state::{AppState, LoadedState};

pub fn build_router(state: AppState) -> Router {
    Router::new()
        .route("/rank", post(handle_rank))
        .route("/events", post(handle_events))
        .route("/health", get(handle_health))
        .route("/priors/{user}/{carousel}", get(handle_prior_debug))
        .with_state(state)
}

struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_ready() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "service is still loading")
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn ready(state: &AppState) -> Result<Arc<LoadedState>, ApiError> {
    state.get().ok_or_else(ApiError::not_ready)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankRequest {
    user: UserId,
    candidates: Vec<Carousel>,
    zones: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ScoreBreakdown {
    alpha: f64,
    gamma: f64,
    phi: f64,
    lambda: f64,
}

#[derive(Debug, Serialize)]
struct RankResponse {
    user: UserId,
    /// Carousel ids in zone order (zone 1 first).
    ranking: Vec<CarouselId>,
    /// Score breakdown for every candidate, not only the ranked ones.
    scores: BTreeMap<String, ScoreBreakdown>,
    /// Server-side scoring time only; excludes transport and parsing.
    compute_micros: u64,
}

async fn handle_rank(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let loaded = ready(&state)?;
    let request: RankRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed rank request: {e}")))?;

    if request.candidates.is_empty() {
        return Err(ApiError::bad_request("candidates must be non-empty"));
    }
    let mut seen = HashSet::new();
    for carousel in &request.candidates {
        if !seen.insert(carousel.id().clone()) {
            return Err(ApiError::bad_request(format!(
                "duplicate carousel id {:?} in request",
                carousel.id().as_str()
            )));
        }
    }
    let zones = request.zones.unwrap_or(request.candidates.len());
    if zones < 1 {
        return Err(ApiError::bad_request("zones must be >= 1"));
    }

    let outcome = loaded
        .engine
        .rank(&request.user, &request.candidates, zones)
        .map_err(|e| match e {
            EngineError::Scoring(ScoringError::UnknownCategory(item)) => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("no category for item {item:?}"),
            ),
            EngineError::Scoring(other) => ApiError::bad_request(other.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;

    let scores = outcome
        .scores
        .iter()
        .map(|s| {
            (
                s.carousel.as_str().to_string(),
                ScoreBreakdown {
                    alpha: s.alpha,
                    gamma: s.gamma,
                    phi: s.phi,
                    lambda: s.lambda,
                },
            )
        })
        .collect();
    let response = RankResponse {
        user: request.user,
        ranking: outcome.ranking.ids().cloned().collect(),
        scores,
        compute_micros: outcome.compute_micros,
    };
    Ok(Json(response).into_response())
}

async fn handle_events(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let loaded = ready(&state)?;
    let batch: Vec<serde_json::Value> = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("expected a JSON array of events: {e}")))?;

    let mut parsed = Vec::with_capacity(batch.len());
    let mut rejected: Vec<usize> = Vec::new();
    let mut errors: BTreeMap<String, String> = BTreeMap::new();
    for (idx, value) in batch.iter().enumerate() {
        match parse_event(&value.to_string()) {
            Ok(event) => parsed.push(event),
            Err(e) => {
                rejected.push(idx);
                errors.insert(idx.to_string(), e.to_string());
            }
        }
    }

    if !batch.is_empty() && parsed.is_empty() {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "accepted": 0, "rejected": rejected, "errors": errors }),
        });
    }

    let accepted = {
        let mut log = loaded.log.lock().expect("event log mutex poisoned");
        let mut accepted = 0usize;
        for event in &parsed {
            // an append error means the event was not made durable: stop and
            // report only what actually hit the log
            match log.append(event) {
                Ok(_) => accepted += 1,
                Err(e) => {
                    return Err(ApiError::new(
                        StatusCode::INTERNAL_SERVER_ERROR,
                        format!("event log append failed after {accepted} events: {e}"),
                    ))
                }
            }
        }
        accepted
    };

    let mut body = json!({ "accepted": accepted });
    if !rejected.is_empty() {
        body["rejected"] = json!(rejected);
        body["errors"] = json!(errors);
    }
    Ok(Json(body).into_response())
}

async fn handle_health(State(state): State<AppState>) -> Response {
    match state.get() {
        Some(loaded) => Json(json!({
            "status": "ok",
            "artifacts": loaded.info,
        }))
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading" })),
        )
            .into_response(),
    }
}

async fn handle_prior_debug(
    State(state): State<AppState>,
    Path((user, carousel)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let loaded = ready(&state)?;
    let user = UserId::new(user).map_err(|e| ApiError::bad_request(e))?;
    let carousel = CarouselId::new(carousel).map_err(|e| ApiError::bad_request(e))?;
    let prior = loaded.engine.priors().get_or_init(&user, &carousel);
    Ok(Json(json!({
        "a": prior.a,
        "b": prior.b,
        "lambda": prior.expected_lambda(),
    }))
    .into_response())
}
