//! Serves a [`BackendSet`] over the inference-service protocol.
//!
//! Used as the reference server for the remote clients and for
//! record/replay fixtures.

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};

use super::wire::*;
use super::{BackendSet, ChatTranscript, InpaintRequest};
use crate::guidance::LatentState;
use crate::http::{run_blocking, ApiError};

#[derive(Clone)]
struct AppState {
    backends: BackendSet,
    token: Option<String>,
}

pub fn router(backends: BackendSet, token: Option<String>) -> Router {
    Router::new()
        .route(EMBED_IMAGE, post(embed_image))
        .route(EMBED_TEXT, post(embed_text))
        .route(INPAINT, post(inpaint))
        .route(DESCRIBE, post(describe))
        .route(COMPLETE, post(complete))
        .route(SCORE, post(score))
        .with_state(AppState { backends, token })
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = &state.token else {
        return Ok(());
    };
    let given = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(expected.as_str()) {
        Ok(())
    } else {
        Err(ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()))
    }
}

async fn embed_image(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<EmbedImageRequest>,
) -> Result<Json<EmbeddingResponse>, ApiError> {
    authorize(&s, &headers)?;
    let v = run_blocking(move || {
        let img = b64_to_rgb(&req.image_png)?;
        s.backends.embedder.embed_image(&img)
    })
    .await?;
    Ok(Json(EmbeddingResponse { embedding: v.values }))
}

async fn embed_text(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<EmbedTextRequest>,
) -> Result<Json<EmbeddingResponse>, ApiError> {
    authorize(&s, &headers)?;
    let v = run_blocking(move || s.backends.embedder.embed_text(&req.text)).await?;
    Ok(Json(EmbeddingResponse { embedding: v.values }))
}

async fn inpaint(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<InpaintBody>,
) -> Result<Json<ImageResponse>, ApiError> {
    authorize(&s, &headers)?;
    let png = run_blocking(move || {
        let image = b64_to_rgb(&req.image_png)?;
        let mask = b64_to_mask(&req.mask_png)?;
        let out = s.backends.inpainter.inpaint(&InpaintRequest {
            image: &image,
            mask: &mask,
            positive_prompt: &req.positive_prompt,
            negative_prompt: &req.negative_prompt,
            steps: req.steps,
            seed: req.seed,
        })?;
        rgb_to_b64(&out)
    })
    .await?;
    Ok(Json(ImageResponse { image_png: png }))
}

async fn describe(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<DescribeRequest>,
) -> Result<Json<TextResponse>, ApiError> {
    authorize(&s, &headers)?;
    let text = run_blocking(move || {
        let image = b64_to_rgb(&req.image_png)?;
        s.backends.captioner.describe(&image, &req.prompt)
    })
    .await?;
    Ok(Json(TextResponse { text }))
}

async fn complete(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<CompleteRequest>,
) -> Result<Json<TextResponse>, ApiError> {
    authorize(&s, &headers)?;
    let text = run_blocking(move || s.backends.writer.complete(&ChatTranscript { turns: req.turns })).await?;
    Ok(Json(TextResponse { text }))
}

async fn score(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<ScoreRequest>,
) -> Result<Json<ScoreResponse>, ApiError> {
    authorize(&s, &headers)?;
    let score = run_blocking(move || {
        let latent = LatentState::new(req.latent, req.shape, req.t);
        s.backends
            .denoiser
            .score(&latent, req.c_text.as_deref(), req.c_image.as_deref())
    })
    .await?;
    Ok(Json(ScoreResponse { score }))
}
