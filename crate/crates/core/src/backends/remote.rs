//! HTTP/JSON adapters for model servers.
//!
//! Tensors travel as `{"shape": [..], "data": [..]}` in row-major order.
//!
//! | backend    | request                                   | response                         |
//! |------------|-------------------------------------------|----------------------------------|
//! | estimator  | `POST /predict {latent, caption, t}`      | `{eps}`                          |
//! | codec      | `GET /info`                               | `{latent_channels, downscale, reconstruction_mse_bound}` |
//! | codec      | `POST /encode {image}` / `POST /decode {latent}` | `{latent}` / `{image}`    |
//! | detector   | `POST /detect {image, prompt}`            | `{detections: [{box, score, phrase}]}` |
//! | segmenter  | `POST /segment {image, box}`              | `{mask}` (0/1 tensor `[h, w]`)   |
//! | describer  | `POST /answer {image, question}`          | `{answer}`                       |
//! | perceptual | `POST /distance {a, b}`                   | `{distance}`                     |
//! | embedder   | `POST /embed_image {image}` / `POST /embed_text {text}` | `{embedding}`      |
//!
//! Chat uses the OpenAI-compatible `POST {base}/chat/completions`.
//! Every call has a timeout and is retried once on transport errors and 5xx.

use std::sync::Arc;
use std::time::Duration;

use ndarray::{Array2, Array3};
use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendContext, BackendProfile, BackendSet};
use crate::estimators::{LatentCodec, NoiseEstimator};
use crate::language::{ChatClient, VisionDescriber};
use crate::mask::BinaryMask;
use crate::metrics::{EmbeddingBackends, ImageTextEmbedder, PerceptualDistance};
use crate::segmenter::{BoundingBox, Detection, GroundingDetector, SegmentationModel};
use crate::{Error, Image, Latent, Result};

pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_CHAT_MODEL: &str = "gpt-3.5-turbo";
pub const DEFAULT_API_KEY_ENV: &str = "MASKEDIT_CHAT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl WireTensor {
    pub fn from3(a: &Array3<f64>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn into3(self) -> Result<Array3<f64>> {
        match self.shape[..] {
            [c, h, w] => Array3::from_shape_vec((c, h, w), self.data)
                .map_err(|e| Error::InvalidConfig(format!("bad tensor payload: {e}"))),
            _ => Err(Error::shape(&[0, 0, 0], &self.shape)),
        }
    }

    pub fn into2(self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [h, w] => Array2::from_shape_vec((h, w), self.data)
                .map_err(|e| Error::InvalidConfig(format!("bad tensor payload: {e}"))),
            _ => Err(Error::shape(&[0, 0], &self.shape)),
        }
    }
}

/// JSON client with timeout and a single retry.
#[derive(Debug, Clone)]
pub struct JsonHttp {
    name: String,
    base: String,
    client: Client,
    bearer: Option<String>,
}

impl JsonHttp {
    pub fn new(name: &str, base: &str, timeout: Duration) -> Result<Self> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::backend(name, e))?;
        Ok(Self {
            name: name.to_string(),
            base: base.trim_end_matches('/').to_string(),
            client,
            bearer: None,
        })
    }

    pub fn with_bearer(mut self, token: Option<String>) -> Self {
        self.bearer = token;
        self
    }

    fn once(&self, path: &str, body: Option<&Value>) -> std::result::Result<Value, (bool, String)> {
        let url = format!("{}{path}", self.base);
        let mut req = match body {
            Some(b) => self.client.post(&url).json(b),
            None => self.client.get(&url),
        };
        if let Some(t) = &self.bearer {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err((status.is_server_error(), format!("{status}: {}", text.chars().take(200).collect::<String>())));
        }
        resp.json::<Value>().map_err(|e| (false, e.to_string()))
    }

    pub fn call<T: DeserializeOwned>(&self, path: &str, body: Option<Value>) -> Result<T> {
        let value = match self.once(path, body.as_ref()) {
            Ok(v) => v,
            Err((true, first)) => {
                tracing::warn!(backend = %self.name, "retrying after: {first}");
                self.once(path, body.as_ref())
                    .map_err(|(_, e)| Error::backend(&self.name, e))?
            }
            Err((false, e)) => return Err(Error::backend(&self.name, e)),
        };
        serde_json::from_value(value).map_err(|e| Error::backend(&self.name, format!("unexpected response: {e}")))
    }
}

pub struct RemoteEstimator {
    http: JsonHttp,
}

impl RemoteEstimator {
    pub fn new(http: JsonHttp) -> Self {
        Self { http }
    }
}

#[derive(Deserialize)]
struct EpsResponse {
    eps: WireTensor,
}

impl NoiseEstimator for RemoteEstimator {
    fn name(&self) -> &str {
        &self.http.name
    }

    fn is_reentrant(&self) -> bool {
        false
    }

    fn predict(&self, x: &Latent, caption: &str, t: usize) -> Result<Latent> {
        let r: EpsResponse = self.http.call(
            "/predict",
            Some(json!({"latent": WireTensor::from3(x), "caption": caption, "t": t})),
        )?;
        r.eps.into3()
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CodecInfo {
    pub latent_channels: usize,
    pub downscale: usize,
    pub reconstruction_mse_bound: f64,
}

pub struct RemoteCodec {
    http: JsonHttp,
    info: CodecInfo,
}

impl RemoteCodec {
    /// Queries `/info` once.
    pub fn connect(http: JsonHttp) -> Result<Self> {
        let info = http.call("/info", None)?;
        Ok(Self { http, info })
    }
}

#[derive(Deserialize)]
struct LatentResponse {
    latent: WireTensor,
}

#[derive(Deserialize)]
struct ImageResponse {
    image: WireTensor,
}

impl LatentCodec for RemoteCodec {
    fn name(&self) -> &str {
        &self.http.name
    }

    fn latent_channels(&self) -> usize {
        self.info.latent_channels
    }

    fn downscale(&self) -> usize {
        self.info.downscale
    }

    fn reconstruction_mse_bound(&self) -> f64 {
        self.info.reconstruction_mse_bound
    }

    fn is_reentrant(&self) -> bool {
        false
    }

    fn encode(&self, image: &Image) -> Result<Latent> {
        crate::estimators::validate_image(image)?;
        let r: LatentResponse = self.http.call("/encode", Some(json!({"image": WireTensor::from3(image)})))?;
        r.latent.into3()
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let r: ImageResponse = self.http.call("/decode", Some(json!({"latent": WireTensor::from3(latent)})))?;
        Ok(r.image.into3()?.mapv(|v| v.clamp(0.0, 1.0)))
    }
}

pub struct RemoteDetector {
    http: JsonHttp,
}

#[derive(Deserialize)]
struct DetectResponse {
    detections: Vec<Detection>,
}

impl GroundingDetector for RemoteDetector {
    fn name(&self) -> &str {
        &self.http.name
    }

    fn detect(&self, image: &Image, prompt: &str) -> Result<Vec<Detection>> {
        let r: DetectResponse = self.http.call(
            "/detect",
            Some(json!({"image": WireTensor::from3(image), "prompt": prompt})),
        )?;
        Ok(r.detections)
    }
}

pub struct RemoteSegmenter {
    http: JsonHttp,
}

#[derive(Deserialize)]
struct MaskResponse {
    mask: WireTensor,
}

impl SegmentationModel for RemoteSegmenter {
    fn name(&self) -> &str {
        &self.http.name
    }

    fn segment(&self, image: &Image, bbox: &BoundingBox) -> Result<BinaryMask> {
        let r: MaskResponse = self.http.call(
            "/segment",
            Some(json!({"image": WireTensor::from3(image), "box": bbox})),
        )?;
        Ok(BinaryMask::new(r.mask.into2()?.mapv(|v| v >= 0.5)))
    }
}

pub struct RemoteDescriber {
    http: JsonHttp,
}

#[derive(Deserialize)]
struct AnswerResponse {
    answer: String,
}

impl VisionDescriber for RemoteDescriber {
    fn name(&self) -> &str {
        &self.http.name
    }

    fn answer(&self, image: &Image, question: &str) -> Result<String> {
        let r: AnswerResponse = self.http.call(
            "/answer",
            Some(json!({"image": WireTensor::from3(image), "question": question})),
        )?;
        Ok(r.answer)
    }
}

pub struct RemotePerceptual {
    http: JsonHttp,
}

#[derive(Deserialize)]
struct DistanceResponse {
    distance: f64,
}

impl PerceptualDistance for RemotePerceptual {
    fn name(&self) -> &str {
        &self.http.name
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let r: DistanceResponse = self.http.call(
            "/distance",
            Some(json!({"a": WireTensor::from3(a), "b": WireTensor::from3(b)})),
        )?;
        Ok(r.distance)
    }
}

pub struct RemoteEmbedder {
    http: JsonHttp,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f64>,
}

impl ImageTextEmbedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.http.name
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let r: EmbeddingResponse = self.http.call("/embed_image", Some(json!({"image": WireTensor::from3(image)})))?;
        Ok(r.embedding)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let r: EmbeddingResponse = self.http.call("/embed_text", Some(json!({"text": text})))?;
        Ok(r.embedding)
    }
}

/// OpenAI-compatible chat completion client. The API key is read from the
/// environment, never from config files.
pub struct OpenAiChat {
    http: JsonHttp,
    model: String,
}

impl OpenAiChat {
    pub fn new(http: JsonHttp, model: &str) -> Self {
        Self {
            http,
            model: model.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl ChatClient for OpenAiChat {
    fn name(&self) -> &str {
        &self.http.name
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let r: ChatResponse = self.http.call(
            "/chat/completions",
            Some(json!({
                "model": self.model,
                "temperature": 0,
                "messages": [{"role": "user", "content": prompt}],
            })),
        )?;
        r.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::backend(&self.http.name, "empty choices"))
    }
}

/// Adapters for `remote` (endpoints required) and `local` (localhost
/// defaults for anything unset).
#[derive(Debug, Clone, Copy)]
pub struct RemoteProfile {
    pub localhost_defaults: bool,
}

const LOCAL_DEFAULTS: [(&str, &str); 6] = [
    ("estimator", "http://127.0.0.1:7001"),
    ("codec", "http://127.0.0.1:7002"),
    ("detector", "http://127.0.0.1:7003"),
    ("segmenter", "http://127.0.0.1:7004"),
    ("describer", "http://127.0.0.1:7005"),
    ("chat", "http://127.0.0.1:8000/v1"),
];

impl RemoteProfile {
    fn endpoint(&self, configured: &Option<String>, kind: &str) -> Option<String> {
        configured.clone().or_else(|| {
            self.localhost_defaults
                .then(|| LOCAL_DEFAULTS.iter().find(|(k, _)| *k == kind).map(|(_, v)| v.to_string()))
                .flatten()
        })
    }

    fn required(&self, configured: &Option<String>, kind: &str, timeout: Duration) -> Result<JsonHttp> {
        let url = self.endpoint(configured, kind).ok_or_else(|| Error::BackendUnavailable {
            backend: kind.to_string(),
            reason: "no endpoint configured".into(),
        })?;
        JsonHttp::new(kind, &url, timeout)
    }
}

impl BackendProfile for RemoteProfile {
    fn build(&self, ctx: &BackendContext) -> Result<BackendSet> {
        let e = &ctx.endpoints;
        let timeout = Duration::from_secs(e.timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS));
        let key_env = e.chat_api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
        let chat_http = self.required(&e.chat, "chat", timeout)?.with_bearer(std::env::var(key_env).ok());
        let optional = |url: &Option<String>, kind: &str| -> Result<Option<JsonHttp>> {
            self.endpoint(url, kind).map(|u| JsonHttp::new(kind, &u, timeout)).transpose()
        };
        Ok(BackendSet {
            estimator: Arc::new(RemoteEstimator::new(self.required(&e.estimator, "estimator", timeout)?)),
            codec: Arc::new(RemoteCodec::connect(self.required(&e.codec, "codec", timeout)?)?),
            detector: Arc::new(RemoteDetector {
                http: self.required(&e.detector, "detector", timeout)?,
            }),
            segmenter: Arc::new(RemoteSegmenter {
                http: self.required(&e.segmenter, "segmenter", timeout)?,
            }),
            chat: Arc::new(OpenAiChat::new(chat_http, e.chat_model.as_deref().unwrap_or(DEFAULT_CHAT_MODEL))),
            describer: optional(&e.describer, "describer")?
                .map(|http| Arc::new(RemoteDescriber { http }) as Arc<dyn VisionDescriber>),
            embeddings: EmbeddingBackends {
                perceptual: optional(&e.perceptual, "perceptual")?
                    .map(|http| Arc::new(RemotePerceptual { http }) as Arc<dyn PerceptualDistance>),
                embedder: optional(&e.embedder, "embedder")?
                    .map(|http| Arc::new(RemoteEmbedder { http }) as Arc<dyn ImageTextEmbedder>),
            },
        })
    }
}
