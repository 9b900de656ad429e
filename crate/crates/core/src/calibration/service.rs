//! HTTP API for the annotation UI.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET | `/api/candidates` | `offset`, `limit` |
//! | GET | `/api/annotations` | full log |
//! | POST | `/api/annotations` | `{pair_id, candidate_index, label, annotator_id}` |
//! | GET | `/api/sweep` | `filter`, optional `thresholds=a,b,c` |
//! | GET | `/api/suggest` | `filter`, optional `epsilon` |
//! | PUT | `/api/thresholds` | `{thresholds: {<filter>: value}}` |
//! | GET | `/api/images/{ref}` | raw blob bytes |
//!
//! Writes go through a single mutex, so the log order is the ack order.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{
    default_thresholds, export_thresholds, filter_scores, suggest_threshold, sweep_threshold, Annotation,
    AnnotationStore, CandidateInfo, CandidateKey, Filter, Label, Orientation, Suggestion, SweepPoint,
};
use crate::blob::{BlobRef, BlobStore, LocalBlobStore};
use crate::error::Error;
use crate::http::{run_blocking, ApiError};

pub struct CalibrationState {
    pub candidates: Vec<CandidateInfo>,
    pub store: Mutex<AnnotationStore>,
    pub blobs: LocalBlobStore,
    /// Pipeline config that `PUT /api/thresholds` merges into.
    pub config_path: Option<PathBuf>,
    pub default_epsilon: f64,
    pub token: Option<String>,
}

type Shared = Arc<CalibrationState>;

pub fn router(state: CalibrationState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/candidates", get(candidates))
        .route("/api/annotations", get(annotations).post(annotate))
        .route("/api/sweep", get(sweep))
        .route("/api/suggest", get(suggest))
        .route("/api/thresholds", axum::routing::put(thresholds))
        .route("/api/images/{*blob}", get(image))
        .with_state(Arc::new(state));
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

fn authorize(s: &CalibrationState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = &s.token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(expected.as_str()) {
        Ok(())
    } else {
        Err(ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()))
    }
}

fn lock(s: &CalibrationState) -> Result<std::sync::MutexGuard<'_, AnnotationStore>, ApiError> {
    s.store
        .lock()
        .map_err(|_| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "annotation store poisoned".into()))
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateView {
    #[serde(flatten)]
    pub info: CandidateInfo,
    pub effective_label: Option<Label>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidatePage {
    pub total: usize,
    pub offset: usize,
    pub items: Vec<CandidateView>,
    pub annotation_seq: u64,
}

async fn candidates(State(s): State<Shared>, headers: HeaderMap, Query(p): Query<Page>) -> Result<Json<CandidatePage>, ApiError> {
    authorize(&s, &headers)?;
    let store = lock(&s)?;
    let labels = store.effective_labels();
    let limit = p.limit.unwrap_or(50).min(1000);
    let items = s
        .candidates
        .iter()
        .skip(p.offset)
        .take(limit)
        .map(|c| CandidateView {
            effective_label: labels.get(&c.key).copied(),
            info: c.clone(),
        })
        .collect();
    Ok(Json(CandidatePage {
        total: s.candidates.len(),
        offset: p.offset,
        items,
        annotation_seq: store.last_seq(),
    }))
}

async fn annotations(State(s): State<Shared>, headers: HeaderMap) -> Result<Json<Vec<Annotation>>, ApiError> {
    authorize(&s, &headers)?;
    Ok(Json(lock(&s)?.log().to_vec()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub pair_id: String,
    pub candidate_index: u32,
    pub label: Label,
    pub annotator_id: String,
}

async fn annotate(
    State(s): State<Shared>,
    headers: HeaderMap,
    Json(req): Json<AnnotationRequest>,
) -> Result<(StatusCode, Json<Annotation>), ApiError> {
    authorize(&s, &headers)?;
    let a = lock(&s)?.record(CandidateKey::new(req.pair_id, req.candidate_index), req.label, &req.annotator_id)?;
    Ok((StatusCode::CREATED, Json(a)))
}

#[derive(Debug, Deserialize)]
struct SweepQuery {
    filter: String,
    thresholds: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepResponse {
    pub filter: Filter,
    pub orientation: Orientation,
    pub annotation_seq: u64,
    /// Annotated candidates left out for lacking this filter's score.
    pub unscored: usize,
    pub points: Vec<SweepPoint>,
}

fn parse_list(s: &str) -> Result<Vec<f64>, ApiError> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("bad threshold {t:?}: {e}")))
        })
        .collect()
}

fn compute_sweep(s: &CalibrationState, filter: Filter, thresholds: Option<Vec<f64>>) -> Result<SweepResponse, ApiError> {
    let store = lock(s)?;
    let scores = filter_scores(&s.candidates, filter);
    let mut labels = store.effective_labels();
    let before = labels.len();
    labels.retain(|k, _| scores.contains_key(k));
    let unscored = before - labels.len();
    let thresholds = thresholds.unwrap_or_else(|| default_thresholds(labels.keys().map(|k| scores[k]), filter.orientation()));
    let points = sweep_threshold(&labels, &scores, &thresholds, filter.orientation())?;
    Ok(SweepResponse {
        filter,
        orientation: filter.orientation(),
        annotation_seq: store.last_seq(),
        unscored,
        points,
    })
}

async fn sweep(State(s): State<Shared>, headers: HeaderMap, Query(q): Query<SweepQuery>) -> Result<Json<SweepResponse>, ApiError> {
    authorize(&s, &headers)?;
    let filter = Filter::parse(&q.filter)?;
    let thresholds = q.thresholds.as_deref().map(parse_list).transpose()?;
    Ok(Json(compute_sweep(&s, filter, thresholds)?))
}

#[derive(Debug, Deserialize)]
struct SuggestQuery {
    filter: String,
    epsilon: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SuggestResponse {
    pub filter: Filter,
    pub epsilon: f64,
    #[serde(flatten)]
    pub suggestion: Suggestion,
    pub annotation_seq: u64,
}

async fn suggest(State(s): State<Shared>, headers: HeaderMap, Query(q): Query<SuggestQuery>) -> Result<Json<SuggestResponse>, ApiError> {
    authorize(&s, &headers)?;
    let filter = Filter::parse(&q.filter)?;
    let epsilon = q.epsilon.unwrap_or(s.default_epsilon);
    let sw = compute_sweep(&s, filter, None)?;
    let suggestion = suggest_threshold(&sw.points, epsilon)?;
    Ok(Json(SuggestResponse {
        filter,
        epsilon,
        suggestion,
        annotation_seq: sw.annotation_seq,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ThresholdsRequest {
    pub thresholds: BTreeMap<Filter, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ThresholdsResponse {
    /// The fragment as TOML text.
    pub fragment: String,
    /// The whole config after merging, as TOML text.
    pub config: String,
}

async fn thresholds(
    State(s): State<Shared>,
    headers: HeaderMap,
    Json(req): Json<ThresholdsRequest>,
) -> Result<Json<ThresholdsResponse>, ApiError> {
    authorize(&s, &headers)?;
    if req.thresholds.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "no thresholds given".into()));
    }
    if let Some((f, v)) = req.thresholds.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("threshold for {} is not finite: {v}", f.name())));
    }
    let pairs: Vec<(Filter, f64)> = req.thresholds.into_iter().collect();
    let fragment = export_thresholds(&pairs);
    let Some(path) = s.config_path.clone() else {
        return Err(ApiError(StatusCode::CONFLICT, "service was started without a config file".into()));
    };
    let frag = fragment.clone();
    let merged = run_blocking(move || crate::config::merge_into_file(&path, &frag)).await?;
    let text = |t: &toml::Table| toml::to_string(t).map_err(|e| ApiError::from(Error::Config(e.to_string())));
    Ok(Json(ThresholdsResponse {
        fragment: text(&fragment)?,
        config: text(&merged)?,
    }))
}

async fn image(State(s): State<Shared>, headers: HeaderMap, UrlPath(blob): UrlPath<String>) -> Result<impl IntoResponse, ApiError> {
    authorize(&s, &headers)?;
    let r = BlobRef(blob);
    let content_type = match r.0.rsplit('.').next() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    let bytes = s.blobs.get(&r).map_err(|e| match e {
        Error::Io { .. } => ApiError(StatusCode::NOT_FOUND, e.to_string()),
        other => other.into(),
    })?;
    Ok(([(header::CONTENT_TYPE, content_type)], bytes))
}
