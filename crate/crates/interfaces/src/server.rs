//! JSON-over-HTTP service over a [`RunStore`].
//!
//! Sealed runs are read without locks. Reclassification and live
//! segmentation recompute from cached artifacts and never write.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use phasewatch_core::pelt::{self, DEFAULT_MIN_SEGMENT};
use phasewatch_core::phases::{self, Framework, PhaseThresholds, PhaseTimeline};
use phasewatch_core::RiskSeries;
use serde_json::{json, Value};

use crate::card::{self, CardError};
use crate::config::{PipelineConfig, SWEEP_AXES};
use crate::declaration::DeclarationRequest;
use crate::pipeline::{counts_at, PanelArtifact, SegmentationArtifact};
use crate::store::{RunStatus, RunStore, StoreError};

pub struct AppState {
    pub store: RunStore,
    /// Anchor for relative input paths in posted configs.
    pub data_root: PathBuf,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownRun(_) | StoreError::UnknownArtifact { .. } => StatusCode::NOT_FOUND,
            StoreError::Sealed(_) | StoreError::InProgress(_) => StatusCode::CONFLICT,
            StoreError::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Io { .. } | StoreError::Json { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<CardError> for ApiError {
    fn from(e: CardError) -> Self {
        match e {
            CardError::Store(s) => s.into(),
            other => Self::new(StatusCode::NOT_FOUND, other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_manifest))
        .route("/runs/{id}/artifacts/{name}", get(get_artifact))
        .route("/runs/{id}/classify", get(classify))
        .route("/runs/{id}/segments", get(segments))
        .route("/runs/{id}/sweeps/{axis}", get(sweep))
        .route("/runs/{id}/declarations", post(declare).get(list_declarations))
        .route("/runs/{id}/card", get(get_card))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn create_run(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::invalid("config body is not UTF-8"))?;
    let cfg = PipelineConfig::from_json(text).map_err(|e| ApiError::invalid(e.to_string()))?;
    let manifest = tokio::task::spawn_blocking(move || st.store.execute(&cfg, &st.data_root))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    if let RunStatus::Failed { stage, message } = &manifest.status {
        let body = json!({
            "error": format!("stage {stage} failed: {message}"),
            "stage": stage,
            "run_id": manifest.run_id,
        });
        return Ok((StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response());
    }
    let body = json!({ "run_id": manifest.run_id, "run_digest": manifest.run_digest, "artifacts": manifest.artifacts.keys().collect::<Vec<_>>() });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn list_runs(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    Ok(Json(json!({ "runs": st.store.list()? })))
}

async fn get_manifest(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(st.store.manifest(&id)?).into_response())
}

async fn get_artifact(State(st): State<Arc<AppState>>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    Ok(json_bytes(st.store.artifact_bytes(&id, &name)?))
}

fn parse_f64(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<f64>> {
    match q.get(key) {
        None => Ok(None),
        Some(raw) => match raw.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(ApiError::invalid(format!("`{key}` must be a finite number, got `{raw}`"))),
        },
    }
}

fn parse_framework(q: &HashMap<String, String>) -> ApiResult<Framework> {
    match q.get("framework").map(|s| s.trim()) {
        None => Ok(Framework::default()),
        Some("three") | Some("3") => Ok(Framework::Three),
        Some("six") | Some("6") => Ok(Framework::Six),
        Some(other) => Err(ApiError::invalid(format!("unknown framework `{other}`; use `three` or `six`"))),
    }
}

fn load_timeline(st: &AppState, id: &str) -> ApiResult<PhaseTimeline> {
    st.store
        .artifact_opt(id, "timeline")?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("run `{id}` has no phase timeline")))
}

fn load_risk(st: &AppState, id: &str) -> ApiResult<(RiskSeries, PanelArtifact)> {
    let risk = st
        .store
        .artifact_opt(id, "risk")?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("run `{id}` has no risk series")))?;
    Ok((risk, st.store.artifact(id, "panel")?))
}

async fn classify(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    st.store.manifest(&id)?;
    let framework = parse_framework(&q)?;
    let base = load_timeline(&st, &id)?.thresholds;
    let low = parse_f64(&q, "theta_low")?.unwrap_or(base.theta_low);
    let high = parse_f64(&q, "theta_high")?.unwrap_or(base.theta_high);
    if !(low < high) {
        return Err(ApiError::invalid(format!("theta_low {low} must be below theta_high {high}")));
    }
    let th = PhaseThresholds { theta_low: low, theta_high: high, ..base };
    let (risk, panel) = load_risk(&st, &id)?;
    let tl = phases::timeline(&panel.panel, &risk, &th).map_err(|e| ApiError::invalid(e.to_string()))?;
    let (labels, distribution, transitions) = match framework {
        Framework::Six => (json!(tl.six_phase), json!(tl.distribution_six), json!(tl.transitions_six)),
        Framework::Three => (json!(tl.three_phase), json!(tl.distribution_three), json!(tl.transitions_three)),
    };
    Ok(Json(json!({
        "run_id": id,
        "framework": framework,
        "thresholds": th,
        "months": tl.months,
        "labels": labels,
        "distribution": distribution,
        "transitions": transitions,
    })))
}

async fn segments(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    st.store.manifest(&id)?;
    let penalty = parse_f64(&q, "penalty")?.ok_or_else(|| ApiError::invalid("`penalty` is required"))?;
    if penalty <= 0.0 {
        return Err(ApiError::invalid(format!("penalty must be positive, got {penalty}")));
    }
    let (risk, panel) = load_risk(&st, &id)?;
    let min_segment = st
        .store
        .artifact_opt::<SegmentationArtifact>(&id, "segmentation")?
        .map_or(DEFAULT_MIN_SEGMENT, |s| s.segmentation.min_segment);
    let counts = counts_at(&panel.panel, &risk.months).map_err(|e| ApiError::invalid(e.to_string()))?;
    let seg = pelt::pelt_detect(&risk.z, penalty, min_segment)
        .and_then(|s| pelt::segment_stats(&risk.z, &s, Some(&counts)))
        .map_err(|e| ApiError::invalid(e.to_string()))?;
    let main_break = seg.main_break().map(|p| risk.months[p]);
    let phases_json = match st.store.artifact_opt::<PhaseTimeline>(&id, "timeline")? {
        Some(tl) => {
            let six = phases::classify_segments(&seg, &tl.thresholds, Framework::Six);
            let three = phases::classify_segments(&seg, &tl.thresholds, Framework::Three);
            match (six, three) {
                (Ok(six), Ok(three)) => json!({ "six": six, "three": three }),
                (Err(e), _) | (_, Err(e)) => return Err(ApiError::invalid(e.to_string())),
            }
        }
        None => Value::Null,
    };
    Ok(Json(json!({
        "run_id": id,
        "penalty": penalty,
        "months": risk.months,
        "segmentation": seg,
        "main_break": main_break,
        "phases": phases_json,
    })))
}

async fn sweep(State(st): State<Arc<AppState>>, Path((id, axis)): Path<(String, String)>) -> ApiResult<Response> {
    st.store.manifest(&id)?;
    if !SWEEP_AXES.contains(&axis.as_str()) {
        return Err(ApiError::invalid(format!("unknown sweep axis `{axis}`; expected one of {SWEEP_AXES:?}")));
    }
    Ok(json_bytes(st.store.artifact_bytes(&id, &format!("sweep_{axis}"))?))
}

async fn declare(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let manifest = st.store.manifest(&id)?;
    let req: DeclarationRequest = serde_json::from_slice(&body).map_err(|e| ApiError::invalid(e.to_string()))?;
    let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let decl = req.into_declaration(&id, &manifest.domain, now).map_err(|e| ApiError::invalid(e.to_string()))?;
    let st2 = st.clone();
    let d2 = decl.clone();
    tokio::task::spawn_blocking(move || st2.store.append_declaration(&id, &d2))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(decl)).into_response())
}

async fn list_declarations(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(st.store.declarations(&id)?).into_response())
}

async fn get_card(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let card = card::emit_card(&st.store, &id)?;
    let text = card::render_text(&card);
    Ok(Json(json!({ "card": card, "text": text })).into_response())
}
