//! HTTP clients for external inference services.
//!
//! One request per invocation, bounded retries with exponential backoff,
//! and a per-service cap on in-flight requests. Responses are checked
//! against the handle contracts before they are returned.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::wire::{self, *};
use super::{
    BackendSet, Captioner, ChatTranscript, Denoiser, Embedder, InpaintRequest, Inpainter,
    InstructionWriter,
};
use crate::error::{Error, Result};
use crate::guidance::LatentState;
use crate::model::EmbeddingVector;
use crate::raster::Rgb;

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    200
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Declared output dimension; required for embedders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
}

impl ServiceConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        ServiceConfig {
            base_url: base_url.into(),
            token_env: None,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            max_in_flight: default_in_flight(),
            dimension: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub embedder: ServiceConfig,
    /// Defaults to the embedder service when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dino: Option<ServiceConfig>,
    pub inpainter: ServiceConfig,
    pub captioner: ServiceConfig,
    pub writer: ServiceConfig,
    pub denoiser: ServiceConfig,
}

impl RemoteConfig {
    /// All services behind one base URL.
    pub fn single(base_url: &str, dimension: usize) -> Self {
        let mut emb = ServiceConfig::new(base_url);
        emb.dimension = Some(dimension);
        RemoteConfig {
            embedder: emb,
            dino: None,
            inpainter: ServiceConfig::new(base_url),
            captioner: ServiceConfig::new(base_url),
            writer: ServiceConfig::new(base_url),
            denoiser: ServiceConfig::new(base_url),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Network(String),
    Status { code: u16, body: String },
    Decode(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Status { code, .. } => *code >= 500 || *code == 429,
            TransportError::Decode(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Network(m) => write!(f, "network: {m}"),
            TransportError::Status { code, body } => write!(f, "status {code}: {body}"),
            TransportError::Decode(m) => write!(f, "decode: {m}"),
        }
    }
}

pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: &Value) -> std::result::Result<Value, TransportError>;
}

pub struct HttpTransport {
    base_url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(cfg: &ServiceConfig) -> Result<Self> {
        let token = match &cfg.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable {var} (bearer token) is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpTransport {
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            token,
            agent,
        })
    }
}

impl Transport for HttpTransport {
    fn post(&self, path: &str, body: &Value) -> std::result::Result<Value, TransportError> {
        let mut req = self.agent.post(format!("{}{}", self.base_url, path));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let code = resp.status().as_u16();
        if !(200..300).contains(&code) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(TransportError::Status { code, body });
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| TransportError::Decode(e.to_string()))
    }
}

/// One recorded request/response exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub service: String,
    pub path: String,
    pub request: Value,
    pub response: Value,
}

/// Shared log of exchanges, persisted as JSON lines.
#[derive(Debug, Clone, Default)]
pub struct Cassette {
    exchanges: Arc<Mutex<Vec<Exchange>>>,
}

impl Cassette {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.exchanges.lock().expect("cassette lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.exchanges.lock().expect("cassette lock").clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for ex in self.exchanges.lock().expect("cassette lock").iter() {
            out.push_str(&serde_json::to_string(ex)?);
            out.push('\n');
        }
        crate::manifest::write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::manifest::read_text(path)?;
        let exchanges = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<Exchange>>>()?;
        Ok(Cassette {
            exchanges: Arc::new(Mutex::new(exchanges)),
        })
    }

    fn push(&self, ex: Exchange) {
        self.exchanges.lock().expect("cassette lock").push(ex);
    }
}

/// Forwards to an inner transport and records every successful exchange.
pub struct RecordingTransport {
    service: String,
    inner: Arc<dyn Transport>,
    cassette: Cassette,
}

impl RecordingTransport {
    pub fn new(service: &str, inner: Arc<dyn Transport>, cassette: Cassette) -> Self {
        RecordingTransport {
            service: service.to_string(),
            inner,
            cassette,
        }
    }
}

impl Transport for RecordingTransport {
    fn post(&self, path: &str, body: &Value) -> std::result::Result<Value, TransportError> {
        let resp = self.inner.post(path, body)?;
        self.cassette.push(Exchange {
            service: self.service.clone(),
            path: path.to_string(),
            request: body.clone(),
            response: resp.clone(),
        });
        Ok(resp)
    }
}

/// Answers from a recorded cassette; unknown requests fail as network errors.
pub struct ReplayTransport {
    responses: HashMap<(String, String), Value>,
}

impl ReplayTransport {
    pub fn new(service: &str, cassette: &Cassette) -> Self {
        let responses = cassette
            .exchanges()
            .into_iter()
            .filter(|e| e.service == service)
            .map(|e| ((e.path, e.request.to_string()), e.response))
            .collect();
        ReplayTransport { responses }
    }
}

impl Transport for ReplayTransport {
    fn post(&self, path: &str, body: &Value) -> std::result::Result<Value, TransportError> {
        self.responses
            .get(&(path.to_string(), body.to_string()))
            .cloned()
            .ok_or_else(|| TransportError::Network(format!("no recorded response for {path}")))
    }
}

#[derive(Debug)]
struct InFlight {
    max: usize,
    active: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().expect("in-flight lock");
        while *n >= self.max {
            n = self.cv.wait(n).expect("in-flight lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.cv.notify_one();
    }
}

/// Retrying, rate-limited JSON client for one service.
pub struct RemoteClient {
    service: String,
    transport: Arc<dyn Transport>,
    retries: u32,
    backoff: Duration,
    limiter: InFlight,
}

impl RemoteClient {
    pub fn new(service: &str, cfg: &ServiceConfig, transport: Arc<dyn Transport>) -> Self {
        RemoteClient {
            service: service.to_string(),
            transport,
            retries: cfg.retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            limiter: InFlight {
                max: cfg.max_in_flight.max(1),
                active: Mutex::new(0),
                cv: Condvar::new(),
            },
        }
    }

    pub fn service(&self) -> &str {
        &self.service
    }

    pub fn call<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp> {
        let body = serde_json::to_value(req)?;
        let _permit = self.limiter.acquire();
        let mut attempt = 0u32;
        loop {
            match self.transport.post(path, &body) {
                Ok(v) => {
                    return serde_json::from_value(v).map_err(|e| self.protocol(format!("{path}: {e}")));
                }
                Err(e) if e.retryable() && attempt < self.retries => {
                    log::debug!("{} {path} attempt {attempt} failed: {e}", self.service);
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
                Err(e) if e.retryable() => {
                    return Err(Error::BackendUnavailable {
                        service: self.service.clone(),
                        message: format!("{path} failed after {} attempts: {e}", attempt + 1),
                    });
                }
                Err(e) => return Err(self.protocol(format!("{path}: {e}"))),
            }
        }
    }

    fn protocol(&self, message: String) -> Error {
        Error::BackendProtocol {
            service: self.service.clone(),
            message,
        }
    }
}

pub struct RemoteEmbedder {
    client: RemoteClient,
    dimension: usize,
}

impl RemoteEmbedder {
    pub fn new(client: RemoteClient, dimension: usize) -> Self {
        RemoteEmbedder { client, dimension }
    }

    fn check(&self, resp: EmbeddingResponse) -> Result<EmbeddingVector> {
        if resp.embedding.len() != self.dimension {
            return Err(self.client.protocol(format!(
                "embedding dimension {} differs from declared {}",
                resp.embedding.len(),
                self.dimension
            )));
        }
        // already-unit vectors pass through untouched so replies match local backends bit for bit
        let norm = crate::model::l2_norm(&resp.embedding);
        if (norm - 1.0).abs() <= 1e-6 {
            return Ok(EmbeddingVector {
                values: resp.embedding,
                normalized: true,
            });
        }
        EmbeddingVector::unit(resp.embedding).map_err(|e| self.client.protocol(e.to_string()))
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        self.client.service()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_image(&self, image: &Rgb) -> Result<EmbeddingVector> {
        let req = EmbedImageRequest {
            image_png: wire::rgb_to_b64(image)?,
        };
        self.check(self.client.call(EMBED_IMAGE, &req)?)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let req = EmbedTextRequest { text: text.to_string() };
        self.check(self.client.call(EMBED_TEXT, &req)?)
    }
}

pub struct RemoteInpainter(pub RemoteClient);

impl Inpainter for RemoteInpainter {
    fn name(&self) -> &str {
        self.0.service()
    }

    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Rgb> {
        let body = InpaintBody {
            image_png: wire::rgb_to_b64(req.image)?,
            mask_png: wire::mask_to_b64(req.mask)?,
            positive_prompt: req.positive_prompt.to_string(),
            negative_prompt: req.negative_prompt.to_string(),
            steps: req.steps,
            seed: req.seed,
        };
        let resp: ImageResponse = self.0.call(INPAINT, &body)?;
        let out = wire::b64_to_rgb(&resp.image_png).map_err(|e| self.0.protocol(e.to_string()))?;
        if out.dimensions() != req.image.dimensions() {
            return Err(self.0.protocol(format!(
                "inpainted image is {:?}, input is {:?}",
                out.dimensions(),
                req.image.dimensions()
            )));
        }
        Ok(out)
    }
}

pub struct RemoteCaptioner(pub RemoteClient);

impl Captioner for RemoteCaptioner {
    fn name(&self) -> &str {
        self.0.service()
    }

    fn describe(&self, image: &Rgb, prompt: &str) -> Result<String> {
        let req = DescribeRequest {
            image_png: wire::rgb_to_b64(image)?,
            prompt: prompt.to_string(),
        };
        let resp: TextResponse = self.0.call(DESCRIBE, &req)?;
        non_empty(&self.0, resp.text)
    }
}

pub struct RemoteWriter(pub RemoteClient);

impl InstructionWriter for RemoteWriter {
    fn name(&self) -> &str {
        self.0.service()
    }

    fn complete(&self, transcript: &ChatTranscript) -> Result<String> {
        let req = CompleteRequest {
            turns: transcript.turns.clone(),
        };
        let resp: TextResponse = self.0.call(COMPLETE, &req)?;
        non_empty(&self.0, resp.text)
    }
}

fn non_empty(client: &RemoteClient, text: String) -> Result<String> {
    if text.trim().is_empty() {
        return Err(client.protocol("empty text response".into()));
    }
    Ok(text)
}

pub struct RemoteDenoiser(pub RemoteClient);

impl Denoiser for RemoteDenoiser {
    fn name(&self) -> &str {
        self.0.service()
    }

    fn score(&self, latent: &LatentState, text: Option<&[f64]>, image: Option<&[f64]>) -> Result<Vec<f64>> {
        let req = ScoreRequest {
            latent: latent.values.clone(),
            shape: latent.shape.clone(),
            t: latent.t,
            c_text: text.map(<[f64]>::to_vec),
            c_image: image.map(<[f64]>::to_vec),
        };
        let resp: ScoreResponse = self.0.call(SCORE, &req)?;
        if resp.score.len() != latent.values.len() {
            return Err(self.0.protocol(format!(
                "score has {} values, latent has {}",
                resp.score.len(),
                latent.values.len()
            )));
        }
        Ok(resp.score)
    }
}

pub fn make_remote_backends(cfg: &RemoteConfig) -> Result<BackendSet> {
    remote_backends_with(cfg, |_, svc| Ok(Arc::new(HttpTransport::new(svc)?) as Arc<dyn Transport>))
}

/// Builds remote handles over caller-supplied transports (recording, replay, ...).
pub fn remote_backends_with<F>(cfg: &RemoteConfig, mut transport: F) -> Result<BackendSet>
where
    F: FnMut(&str, &ServiceConfig) -> Result<Arc<dyn Transport>>,
{
    let mut client = |name: &str, svc: &ServiceConfig| -> Result<RemoteClient> {
        Ok(RemoteClient::new(name, svc, transport(name, svc)?))
    };
    let dim = |svc: &ServiceConfig, name: &str| {
        svc.dimension
            .ok_or_else(|| Error::Config(format!("remote {name} service needs a declared dimension")))
    };
    let dino_cfg = cfg.dino.as_ref().unwrap_or(&cfg.embedder);
    Ok(BackendSet {
        embedder: Arc::new(RemoteEmbedder::new(client("embedder", &cfg.embedder)?, dim(&cfg.embedder, "embedder")?)),
        dino: Arc::new(RemoteEmbedder::new(client("dino", dino_cfg)?, dim(dino_cfg, "dino")?)),
        inpainter: Arc::new(RemoteInpainter(client("inpainter", &cfg.inpainter)?)),
        captioner: Arc::new(RemoteCaptioner(client("captioner", &cfg.captioner)?)),
        writer: Arc::new(RemoteWriter(client("writer", &cfg.writer)?)),
        denoiser: Arc::new(RemoteDenoiser(client("denoiser", &cfg.denoiser)?)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        reply: Value,
    }

    impl Transport for Flaky {
        fn post(&self, _: &str, _: &Value) -> std::result::Result<Value, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(TransportError::Network("connection refused".into()))
            } else {
                Ok(self.reply.clone())
            }
        }
    }

    fn svc(retries: u32) -> ServiceConfig {
        let mut s = ServiceConfig::new("http://unused");
        s.retries = retries;
        s.backoff_ms = 1;
        s.dimension = Some(3);
        s
    }

    #[test]
    fn retries_then_succeeds() {
        let t = Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 2,
            reply: serde_json::json!({"embedding": [3.0, 0.0, 4.0]}),
        });
        let e = RemoteEmbedder::new(RemoteClient::new("embedder", &svc(3), t.clone()), 3);
        let v = e.embed_text("x").unwrap();
        assert_eq!(v.values, vec![0.6, 0.0, 0.8]);
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn unavailable_after_budget_names_service() {
        let t = Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: usize::MAX,
            reply: Value::Null,
        });
        let e = RemoteEmbedder::new(RemoteClient::new("embedder", &svc(2), t.clone()), 3);
        match e.embed_text("x") {
            Err(Error::BackendUnavailable { service, .. }) => assert_eq!(service, "embedder"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn wrong_dimension_is_protocol_error() {
        let t = Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 0,
            reply: serde_json::json!({"embedding": [1.0, 0.0]}),
        });
        let e = RemoteEmbedder::new(RemoteClient::new("embedder", &svc(0), t), 3);
        assert!(matches!(e.embed_text("x"), Err(Error::BackendProtocol { .. })));
    }

    #[test]
    fn missing_token_env_is_config_error() {
        let mut s = svc(0);
        s.token_env = Some("PIPE_TEST_TOKEN_THAT_IS_NOT_SET".into());
        assert!(matches!(HttpTransport::new(&s), Err(Error::Config(_))));
    }
}
