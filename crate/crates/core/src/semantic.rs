//! Client for the semantic scoring service, plus an offline proxy.
//!
//! Wire protocol (JSON over HTTP):
//!
//! ```text
//! POST /score   {"metric", "image_a"?, "image_b"?, "prompt"?}  ->  {"score", "model_id"}
//! GET  /health                                                 ->  {"status", "model_id"}
//! ```
//!
//! Images travel as base64-encoded PNG. For `dreamsim_canny` the client sends
//! the edge maps (replicated to three channels), not the raw renders.

use crate::raster::{canny_pipeline, resample_bilinear, EdgeParams, RasterError, RasterImage};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::time::Duration;

/// Side of the grayscale thumbnail compared by the local proxy.
pub const PROXY_SIDE: usize = 16;
pub const LOCAL_PROXY_MODEL_ID: &str = "local-proxy-gray16-cosine";
/// Environment variable naming the scoring service endpoint.
pub const ENDPOINT_ENV: &str = "RLRF_SEMANTIC_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticMetric {
    Dreamsim,
    DreamsimCanny,
    ClipText,
    JudgeEasy,
    JudgeHard,
}

impl SemanticMetric {
    /// Documented score range.
    pub fn range(self) -> (f64, f64) {
        match self {
            SemanticMetric::Dreamsim | SemanticMetric::DreamsimCanny => (0.0, 2.0),
            SemanticMetric::ClipText => (-1.0, 1.0),
            SemanticMetric::JudgeEasy | SemanticMetric::JudgeHard => (0.0, 1.0),
        }
    }

    pub fn is_image_pair(self) -> bool {
        matches!(
            self,
            SemanticMetric::Dreamsim | SemanticMetric::DreamsimCanny
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SemanticMetric::Dreamsim => "dreamsim",
            SemanticMetric::DreamsimCanny => "dreamsim_canny",
            SemanticMetric::ClipText => "clip_text",
            SemanticMetric::JudgeEasy => "judge_easy",
            SemanticMetric::JudgeHard => "judge_hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Remote,
    #[default]
    LocalProxy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticBackend {
    #[serde(default)]
    pub mode: BackendMode,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after the first failed one.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

impl Default for SemanticBackend {
    fn default() -> Self {
        Self::local_proxy()
    }
}

impl SemanticBackend {
    pub fn local_proxy() -> Self {
        Self {
            mode: BackendMode::LocalProxy,
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self {
            mode: BackendMode::Remote,
            endpoint: Some(endpoint.into()),
            ..Self::local_proxy()
        }
    }

    pub fn validate(&self) -> Result<(), SemanticError> {
        if self.timeout_ms == 0 {
            return Err(SemanticError::Config("timeout_ms must be positive".into()));
        }
        if self.mode == BackendMode::Remote && self.endpoint.as_deref().map_or(true, str::is_empty)
        {
            return Err(SemanticError::Config(
                "remote backend needs an endpoint".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub metric: SemanticMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub ok: bool,
    pub model_id: Option<String>,
    pub detail: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SemanticError {
    #[error("semantic backend unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("metric {0:?} needs the remote service")]
    UnsupportedLocally(SemanticMetric),
    #[error("metric {0:?} cannot be used here")]
    WrongMetric(SemanticMetric),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("image encoding failed: {0}")]
    Encode(#[from] RasterError),
}

/// Thread-safe client; one instance can serve every rollout in a group.
#[derive(Clone)]
pub struct SemanticClient {
    backend: SemanticBackend,
    agent: Option<ureq::Agent>,
    edge: EdgeParams,
}

impl std::fmt::Debug for SemanticClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemanticClient")
            .field("backend", &self.backend)
            .finish_non_exhaustive()
    }
}

impl SemanticClient {
    pub fn new(backend: SemanticBackend) -> Result<Self, SemanticError> {
        backend.validate()?;
        let agent = (backend.mode == BackendMode::Remote).then(|| {
            ureq::AgentBuilder::new()
                .timeout(Duration::from_millis(backend.timeout_ms))
                .build()
        });
        Ok(Self {
            backend,
            agent,
            edge: EdgeParams::default(),
        })
    }

    pub fn local_proxy() -> Self {
        Self::new(SemanticBackend::local_proxy()).expect("local proxy config is valid")
    }

    /// Edge parameters used for `dreamsim_canny`.
    pub fn with_edge_params(mut self, edge: EdgeParams) -> Self {
        self.edge = edge;
        self
    }

    pub fn backend(&self) -> &SemanticBackend {
        &self.backend
    }

    /// Similarity-as-distance `sim = 1 - cos` in `[0, 2]`; the reward is `1 - sim`.
    pub fn score_pair(
        &self,
        a: &RasterImage,
        b: &RasterImage,
        metric: SemanticMetric,
    ) -> Result<f64, SemanticError> {
        if !metric.is_image_pair() {
            return Err(SemanticError::WrongMetric(metric));
        }
        let (a, b) = if metric == SemanticMetric::DreamsimCanny {
            (
                canny_pipeline(a, &self.edge).to_rgb(),
                canny_pipeline(b, &self.edge).to_rgb(),
            )
        } else {
            (a.clone(), b.clone())
        };
        match self.backend.mode {
            BackendMode::LocalProxy => Ok(local_proxy_similarity(&a, &b)),
            BackendMode::Remote => {
                let req = ScoreRequest {
                    metric,
                    image_a: Some(encode_png_b64(&a)?),
                    image_b: Some(encode_png_b64(&b)?),
                    prompt: None,
                };
                Ok(self.post_score(&req)?.score)
            }
        }
    }

    /// Text-image scores: `clip_text` in `[-1, 1]`, judges in `[0, 1]`.
    pub fn score_text_image(
        &self,
        prompt: &str,
        img: &RasterImage,
        metric: SemanticMetric,
    ) -> Result<f64, SemanticError> {
        if metric.is_image_pair() {
            return Err(SemanticError::WrongMetric(metric));
        }
        if self.backend.mode == BackendMode::LocalProxy {
            return Err(SemanticError::UnsupportedLocally(metric));
        }
        let req = ScoreRequest {
            metric,
            image_a: Some(encode_png_b64(img)?),
            image_b: None,
            prompt: Some(prompt.to_owned()),
        };
        Ok(self.post_score(&req)?.score)
    }

    /// Never fails; problems are reported in the status.
    pub fn health_check(&self) -> HealthStatus {
        match self.backend.mode {
            BackendMode::LocalProxy => HealthStatus {
                ok: true,
                model_id: Some(LOCAL_PROXY_MODEL_ID.to_owned()),
                detail: None,
            },
            BackendMode::Remote => {
                #[derive(Deserialize)]
                struct Health {
                    status: String,
                    #[serde(default)]
                    model_id: Option<String>,
                }
                let result = self
                    .agent()
                    .and_then(|agent| {
                        agent
                            .get(&self.url("health"))
                            .call()
                            .map_err(|e| SemanticError::Protocol(e.to_string()))
                    })
                    .and_then(|resp| {
                        resp.into_json::<Health>()
                            .map_err(|e| SemanticError::Protocol(e.to_string()))
                    });
                match result {
                    Ok(h) => HealthStatus {
                        ok: h.status == "ok",
                        model_id: h.model_id,
                        detail: Some(h.status),
                    },
                    Err(e) => HealthStatus {
                        ok: false,
                        model_id: None,
                        detail: Some(e.to_string()),
                    },
                }
            }
        }
    }

    fn agent(&self) -> Result<&ureq::Agent, SemanticError> {
        self.agent
            .as_ref()
            .ok_or_else(|| SemanticError::Config("no remote endpoint configured".into()))
    }

    fn url(&self, path: &str) -> String {
        let base = self
            .backend
            .endpoint
            .as_deref()
            .unwrap_or_default()
            .trim_end_matches('/');
        format!("{base}/{path}")
    }

    fn post_score(&self, req: &ScoreRequest) -> Result<ScoreResponse, SemanticError> {
        let agent = self.agent()?;
        let url = self.url("score");
        let attempts = self.backend.retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * attempt as u64));
            }
            match agent.post(&url).send_json(req) {
                Ok(resp) => {
                    let body: ScoreResponse = resp
                        .into_json()
                        .map_err(|e| SemanticError::Protocol(format!("bad response body: {e}")))?;
                    let (lo, hi) = req.metric.range();
                    if !body.score.is_finite() || body.score < lo || body.score > hi {
                        return Err(SemanticError::Protocol(format!(
                            "{} score {} outside [{lo}, {hi}]",
                            req.metric.as_str(),
                            body.score
                        )));
                    }
                    return Ok(body);
                }
                Err(ureq::Error::Status(code, resp)) if code < 500 => {
                    let text = resp.into_string().unwrap_or_default();
                    return Err(SemanticError::Protocol(format!("status {code}: {text}")));
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(SemanticError::BackendUnavailable {
            attempts,
            last_error,
        })
    }
}

pub fn encode_png_b64(img: &RasterImage) -> Result<String, RasterError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(img.to_png_bytes()?))
}

pub fn decode_png_b64(text: &str) -> Result<RasterImage, SemanticError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| SemanticError::Protocol(format!("bad base64: {e}")))?;
    Ok(RasterImage::from_png_bytes(&bytes)?)
}

/// `1 - cos` between mean-centered 16x16 grayscale thumbnails.
///
/// Two constant images count as identical; a constant image against a
/// non-constant one is orthogonal.
pub fn local_proxy_similarity(a: &RasterImage, b: &RasterImage) -> f64 {
    let fa = proxy_features(a);
    let fb = proxy_features(b);
    let na = fa.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = fb.iter().map(|v| v * v).sum::<f64>().sqrt();
    const TINY: f64 = 1e-12;
    let cos = match (na > TINY, nb > TINY) {
        (false, false) => 1.0,
        (true, true) => fa.iter().zip(&fb).map(|(x, y)| x * y).sum::<f64>() / (na * nb),
        _ => 0.0,
    };
    (1.0 - cos.clamp(-1.0, 1.0)).clamp(0.0, 2.0)
}

fn proxy_features(img: &RasterImage) -> Vec<f64> {
    let thumb = resample_bilinear(&img.to_grayscale(), PROXY_SIDE, PROXY_SIDE);
    let mean = thumb.data().iter().sum::<f64>() / thumb.len() as f64;
    thumb.data().iter().map(|v| v - mean).collect()
}
