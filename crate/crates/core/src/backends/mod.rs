//! Backend profiles: named bundles of the five model capabilities plus the
//! optional describer and embedding adapters.
//!
//! `mock` runs fully offline. `remote` talks JSON over HTTP to configured
//! endpoints and `local` is the same adapters with localhost defaults.

#[cfg(feature = "remote")]
pub mod remote;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use crate::estimators::{BlockMeanCodec, CaptionHashEstimator, LatentCodec, NoiseEstimator, Serialized};
use crate::language::{fallback_parse, instruction_from_prompt, ChatClient, Instruction, VisionDescriber, KIND_QUESTION};
use crate::metrics::EmbeddingBackends;
use crate::pipeline::config::Endpoints;
use crate::segmenter::{BoundingBox, BoxSegmenter, Detection, GroundingDetector, MockDetector, SegmentationModel};
use crate::synthetic::Scene;
use crate::mask::BinaryMask;
use crate::{Error, Image, Result};

/// Everything one run needs from the outside world.
#[derive(Clone)]
pub struct BackendSet {
    pub estimator: Arc<dyn NoiseEstimator>,
    pub codec: Arc<dyn LatentCodec>,
    pub detector: Arc<dyn GroundingDetector>,
    pub segmenter: Arc<dyn SegmentationModel>,
    pub chat: Arc<dyn ChatClient>,
    pub describer: Option<Arc<dyn VisionDescriber>>,
    pub embeddings: EmbeddingBackends,
}

impl BackendSet {
    /// Backend names for the run manifest.
    pub fn names(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("estimator".into(), self.estimator.name().to_string());
        m.insert("codec".into(), self.codec.name().to_string());
        m.insert("detector".into(), self.detector.name().to_string());
        m.insert("segmenter".into(), self.segmenter.name().to_string());
        m.insert("chat".into(), self.chat.name().to_string());
        if let Some(d) = &self.describer {
            m.insert("describer".into(), d.name().to_string());
        }
        if let Some(p) = &self.embeddings.perceptual {
            m.insert("perceptual".into(), p.name().to_string());
        }
        if let Some(e) = &self.embeddings.embedder {
            m.insert("embedder".into(), e.name().to_string());
        }
        m
    }
}

/// Per-run inputs a profile may use when building backends.
#[derive(Debug, Clone, Default)]
pub struct BackendContext {
    /// Ground-truth geometry for the mock detector.
    pub scene: Option<Scene>,
    pub endpoints: Endpoints,
}

pub trait BackendProfile: Send + Sync {
    fn build(&self, ctx: &BackendContext) -> Result<BackendSet>;
}

impl<F> BackendProfile for F
where
    F: Fn(&BackendContext) -> Result<BackendSet> + Send + Sync,
{
    fn build(&self, ctx: &BackendContext) -> Result<BackendSet> {
        self(ctx)
    }
}

/// Named profiles. Non-reentrant backends returned by a profile are wrapped
/// so that all runs share one queue per backend name.
pub struct BackendRegistry {
    profiles: HashMap<String, Arc<dyn BackendProfile>>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            profiles: HashMap::new(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    /// `mock`, plus `remote` and `local` when built with the `remote` feature.
    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register("mock", MockProfile::default());
        #[cfg(feature = "remote")]
        {
            r.register("remote", remote::RemoteProfile { localhost_defaults: false });
            r.register("local", remote::RemoteProfile { localhost_defaults: true });
        }
        r
    }

    pub fn register(&mut self, name: &str, profile: impl BackendProfile + 'static) {
        self.profiles.insert(name.to_string(), Arc::new(profile));
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.profiles.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn contains(&self, name: &str) -> bool {
        self.profiles.contains_key(name)
    }

    fn lock_for(&self, kind: &str, name: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(format!("{kind}:{name}"))
            .or_default()
            .clone()
    }

    pub fn build(&self, profile: &str, ctx: &BackendContext) -> Result<BackendSet> {
        let p = self.profiles.get(profile).ok_or_else(|| Error::BackendUnavailable {
            backend: profile.to_string(),
            reason: format!("unknown backend profile; known: {}", self.names().join(", ")),
        })?;
        let mut set = p.build(ctx)?;
        if !set.estimator.is_reentrant() {
            let lock = self.lock_for("estimator", set.estimator.name());
            set.estimator = Arc::new(Serialized::new(set.estimator, lock));
        }
        if !set.codec.is_reentrant() {
            let lock = self.lock_for("codec", set.codec.name());
            set.codec = Arc::new(Serialized::new(set.codec, lock));
        }
        if !set.detector.is_reentrant() {
            let lock = self.lock_for("detector", set.detector.name());
            set.detector = Arc::new(Serialized::new(set.detector, lock));
        }
        if !set.segmenter.is_reentrant() {
            let lock = self.lock_for("segmenter", set.segmenter.name());
            set.segmenter = Arc::new(Serialized::new(set.segmenter, lock));
        }
        Ok(set)
    }
}

impl GroundingDetector for Serialized<Arc<dyn GroundingDetector>> {
    fn name(&self) -> &str {
        self.inner().name()
    }

    fn detect(&self, image: &Image, prompt: &str) -> Result<Vec<Detection>> {
        let _g = self.guard();
        self.inner().detect(image, prompt)
    }
}

impl SegmentationModel for Serialized<Arc<dyn SegmentationModel>> {
    fn name(&self) -> &str {
        self.inner().name()
    }

    fn padding(&self) -> usize {
        self.inner().padding()
    }

    fn segment(&self, image: &Image, bbox: &BoundingBox) -> Result<BinaryMask> {
        let _g = self.guard();
        self.inner().segment(image, bbox)
    }
}

/// Offline profile: caption-hash estimator, 8x block-mean codec, scene-driven
/// detector, box segmenter, rule-based chat and a scene-driven describer.
#[derive(Debug, Clone)]
pub struct MockProfile {
    pub estimator: CaptionHashEstimator,
    pub codec_factor: usize,
}

impl Default for MockProfile {
    fn default() -> Self {
        Self {
            estimator: CaptionHashEstimator::default(),
            codec_factor: 8,
        }
    }
}

impl BackendProfile for MockProfile {
    fn build(&self, ctx: &BackendContext) -> Result<BackendSet> {
        let scene = ctx.scene.clone().unwrap_or_else(|| Scene::new(0, 0, [0.0; 3]));
        Ok(BackendSet {
            estimator: Arc::new(self.estimator.clone()),
            codec: Arc::new(BlockMeanCodec::new(self.codec_factor)?),
            detector: Arc::new(MockDetector::new(scene.clone())),
            segmenter: Arc::new(BoxSegmenter),
            chat: Arc::new(RuleChat),
            describer: ctx.scene.as_ref().map(|_| Arc::new(SceneDescriber { scene }) as Arc<dyn VisionDescriber>),
            embeddings: EmbeddingBackends::default(),
        })
    }
}

/// Answers task prompts with the deterministic fallback parser, formatted
/// like a chat model's answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleChat;

impl ChatClient for RuleChat {
    fn name(&self) -> &str {
        "rule-chat"
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let text = instruction_from_prompt(prompt)
            .ok_or_else(|| Error::backend("rule-chat", "prompt carries no user instruction"))?;
        Ok(fallback_parse(&Instruction::new(text)?)?.to_answer())
    }
}

/// Describes a synthetic scene from its labels.
#[derive(Debug, Clone)]
pub struct SceneDescriber {
    pub scene: Scene,
}

impl VisionDescriber for SceneDescriber {
    fn name(&self) -> &str {
        "scene-describer"
    }

    fn answer(&self, _image: &Image, question: &str) -> Result<String> {
        if question == KIND_QUESTION {
            return Ok("A photo".into());
        }
        let labels: Vec<String> = self.scene.rects.iter().map(|r| format!("a {}", r.label)).collect();
        Ok(if labels.is_empty() {
            "an empty gray background".into()
        } else {
            format!("{} on a gray background", labels.join(" and "))
        })
    }
}
