//! Request and response bodies of the inference-service protocol.
//!
//! All bodies are JSON. Rasters travel as base64-encoded PNG.
//!
//! | endpoint            | request               | response             |
//! |---------------------|-----------------------|----------------------|
//! | `POST /embed/image` | [`EmbedImageRequest`] | [`EmbeddingResponse`]|
//! | `POST /embed/text`  | [`EmbedTextRequest`]  | [`EmbeddingResponse`]|
//! | `POST /inpaint`     | [`InpaintBody`]       | [`ImageResponse`]    |
//! | `POST /describe`    | [`DescribeRequest`]   | [`TextResponse`]     |
//! | `POST /complete`    | [`CompleteRequest`]   | [`TextResponse`]     |
//! | `POST /score`       | [`ScoreRequest`]      | [`ScoreResponse`]    |
//!
//! Requests carry `Authorization: Bearer <token>` when a token is configured.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::ChatTurn;
use crate::error::{Error, Result};
use crate::raster::{self, Mask, Rgb};

pub const EMBED_IMAGE: &str = "/embed/image";
pub const EMBED_TEXT: &str = "/embed/text";
pub const INPAINT: &str = "/inpaint";
pub const DESCRIBE: &str = "/describe";
pub const COMPLETE: &str = "/complete";
pub const SCORE: &str = "/score";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub image_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintBody {
    pub image_png: String,
    pub mask_png: String,
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub steps: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeRequest {
    pub image_png: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub turns: Vec<ChatTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub latent: Vec<f64>,
    pub shape: Vec<usize>,
    pub t: usize,
    #[serde(default)]
    pub c_text: Option<Vec<f64>>,
    #[serde(default)]
    pub c_image: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: Vec<f64>,
}

pub fn rgb_to_b64(image: &Rgb) -> Result<String> {
    Ok(STANDARD.encode(raster::encode_png_rgb(image)?))
}

pub fn mask_to_b64(mask: &Mask) -> Result<String> {
    Ok(STANDARD.encode(raster::encode_png_mask(mask)?))
}

pub fn b64_to_rgb(s: &str) -> Result<Rgb> {
    raster::decode_rgb(&b64_bytes(s)?)
}

pub fn b64_to_mask(s: &str) -> Result<Mask> {
    raster::decode_mask(&b64_bytes(s)?)
}

fn b64_bytes(s: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(s)
        .map_err(|e| Error::Precondition(format!("invalid base64 payload: {e}")))
}
