use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream, StreamExt};
use qshape_core::qlearn::{GuidanceSet, GuidanceSource, GuidanceTriple};
use qshape_core::runlog::{RunEvent, RunStatus};
use qshape_llm::{sanitize_guidance, LlmClient};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::ApiError;
use crate::run::{ControlVerb, QTableSnapshot, Registry, Run, RunInfo};

pub const HEARTBEAT: Duration = Duration::from_secs(5);

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/v1/runs", post(create_run).get(list_runs))
        .route("/v1/runs/{id}", get(get_run))
        .route("/v1/runs/{id}/guidance", post(submit_guidance))
        .route("/v1/runs/{id}/control", post(control_run))
        .route("/v1/runs/{id}/events", get(stream_events))
        .route("/v1/runs/{id}/qtable", get(qtable))
        .with_state(registry)
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid JSON body: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub status: RunStatus,
}

async fn create_run(State(reg): State<Arc<Registry>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let value: Value = parse(&body)?;
    let config = RunConfig::from_json(value).map_err(ApiError::Invalid)?;
    let run = reg.create(config)?;
    Ok((
        StatusCode::CREATED,
        Json(Created {
            id: run.id.clone(),
            status: run.status(),
        }),
    ))
}

async fn list_runs(State(reg): State<Arc<Registry>>) -> Json<Vec<RunInfo>> {
    Json(reg.list().iter().map(|r| r.info()).collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunDetail {
    #[serde(flatten)]
    pub info: RunInfo,
    pub config: RunConfig,
}

async fn get_run(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> Result<Json<RunDetail>, ApiError> {
    let run = reg.get(&id)?;
    Ok(Json(RunDetail {
        info: run.info(),
        config: run.config.clone(),
    }))
}

/// Either raw triples or free-text feedback for the LLM.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct GuidanceRequest {
    #[serde(default)]
    pub triples: Option<Vec<GuidanceTriple>>,
    #[serde(default)]
    pub feedback: Option<String>,
    #[serde(default)]
    pub source: Option<GuidanceSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceAck {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_id: Option<u64>,
    pub source: GuidanceSource,
    pub accepted_triples: usize,
    pub dropped: usize,
    pub clamped: usize,
    pub duplicates: usize,
    /// Updates the set stays in the regression loss.
    pub window: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

async fn submit_guidance(
    State(reg): State<Arc<Registry>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<GuidanceAck>), ApiError> {
    let run = reg.get(&id)?;
    let req: GuidanceRequest = parse(&body)?;
    if run.status().is_terminal() {
        return Err(ApiError::Conflict(format!("run {id} is {}", run.status())));
    }
    let env = run.env();
    let cfg = run.config.learner_config(env);
    let cap = env.mdp.r_abs_max() / (1.0 - cfg.gamma);
    let window = cfg.guidance_window;

    let raw = match (req.triples, req.feedback) {
        (Some(triples), None) => GuidanceSet::new(req.source.unwrap_or(GuidanceSource::Human), triples),
        (None, Some(text)) => {
            let Some(llm) = run.config.llm.clone() else {
                return Err(ApiError::BadRequest("run has no llm endpoint configured for feedback".into()));
            };
            let prompt = llm.prompt(env, cap, Some(&text)).map_err(|e| ApiError::Internal(e.to_string()))?;
            let fetched = tokio::task::spawn_blocking(move || LlmClient::new(llm.endpoint)?.request_guidance(&prompt))
                .await
                .map_err(|e| ApiError::Internal(e.to_string()))?;
            match fetched {
                Ok(set) => set,
                Err(e) => {
                    tracing::warn!(run = %id, error = %e, "feedback could not be turned into guidance");
                    let ack = GuidanceAck {
                        guidance_id: None,
                        source: GuidanceSource::Llm,
                        accepted_triples: 0,
                        dropped: 0,
                        clamped: 0,
                        duplicates: 0,
                        window,
                        reason: Some(format!("llm unavailable: {e}")),
                    };
                    return Ok((StatusCode::OK, Json(ack)));
                }
            }
        }
        _ => return Err(ApiError::BadRequest("send exactly one of `triples` or `feedback`".into())),
    };

    let clean = sanitize_guidance(&raw, &env.schema, cap);
    let mut set = clean.set;
    set.id = run.next_guidance_id();
    let reason = clean.all_dropped.then(|| "no usable triples".to_string());
    let ack = GuidanceAck {
        guidance_id: Some(set.id),
        source: set.source,
        accepted_triples: set.triples.len(),
        dropped: clean.dropped,
        clamped: clean.clamped,
        duplicates: clean.duplicates,
        window,
        reason,
    };
    // Empty sets are still queued so the run log records the drop.
    run.enqueue(set)?;
    Ok((StatusCode::ACCEPTED, Json(ack)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ControlRequest {
    pub verb: ControlVerb,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ControlResponse {
    pub id: String,
    pub status: RunStatus,
}

async fn control_run(
    State(reg): State<Arc<Registry>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<ControlResponse>, ApiError> {
    let run = reg.get(&id)?;
    let req: ControlRequest = parse(&body)?;
    let mut status = run.control(req.verb)?;
    if req.verb == ControlVerb::Stop {
        // The worker notices at its next step boundary.
        if tokio::time::timeout(Duration::from_secs(10), run.finished()).await.is_ok() {
            status = run.status();
        }
    }
    Ok(Json(ControlResponse { id, status }))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    cursor: Option<usize>,
}

fn sse_event(e: &RunEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.payload.kind())
        .data(serde_json::to_string(e).expect("event serializes"))
}

/// Replays events from `cursor`, then follows live ones until the run ends.
pub fn event_stream(run: Arc<Run>, cursor: usize) -> impl Stream<Item = Vec<RunEvent>> {
    let rx = run.subscribe();
    stream::unfold((run, cursor, rx, false), |(run, cursor, mut rx, ended)| async move {
        if ended {
            return None;
        }
        loop {
            rx.borrow_and_update();
            let (events, done) = run.events_from(cursor);
            if !events.is_empty() {
                let next = cursor + events.len();
                return Some((events, (run, next, rx, false)));
            }
            if done {
                return None;
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn stream_events(
    State(reg): State<Arc<Registry>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let run = reg.get(&id)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
        .map(|seq| seq + 1);
    let cursor = q.cursor.or(resume).unwrap_or(0);
    let events = event_stream(run, cursor).flat_map(|batch| stream::iter(batch.into_iter().map(|e| Ok(sse_event(&e)))));
    Ok(Sse::new(events).keep_alive(KeepAlive::new().interval(HEARTBEAT)))
}

async fn qtable(State(reg): State<Arc<Registry>>, Path(id): Path<String>) -> Result<Json<QTableSnapshot>, ApiError> {
    Ok(Json(reg.get(&id)?.qtable()))
}
