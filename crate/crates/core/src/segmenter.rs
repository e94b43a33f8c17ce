//! Grounded segmentation: a phrase-grounding detector proposes scored boxes,
//! a box-prompted segmentation model turns each box into a pixel mask, and
//! the selected instances are combined by union.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::mask::BinaryMask;
use crate::synthetic::Scene;
use crate::{Error, Image, Result};

/// Segmentation prompt meaning "no specific object"; masks the whole image.
pub const NONE_NEEDED: &str = "None needed";

/// Axis-aligned box `[h, w, dh, dw]`: top-left corner and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    #[serde(rename = "h")]
    pub top: usize,
    #[serde(rename = "w")]
    pub left: usize,
    #[serde(rename = "dh")]
    pub height: usize,
    #[serde(rename = "dw")]
    pub width: usize,
}

impl BoundingBox {
    pub const fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..self.bottom()).contains(&i) && (self.left..self.right()).contains(&j)
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.top < other.bottom()
            && other.top < self.bottom()
            && self.left < other.right()
            && other.left < self.right()
    }

    /// Grows the box by `pad` pixels per side, clipped to the image.
    pub fn padded(&self, pad: usize, h: usize, w: usize) -> BoundingBox {
        let top = self.top.saturating_sub(pad);
        let left = self.left.saturating_sub(pad);
        let bottom = (self.bottom() + pad).min(h);
        let right = (self.right() + pad).min(w);
        BoundingBox::new(top, left, bottom - top, right - left)
    }

    pub fn check_within(&self, h: usize, w: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bottom() > h || self.right() > w {
            return Err(Error::OutOfRange(format!(
                "box [{}, {}, {}, {}] not within a {h}x{w} image",
                self.top, self.left, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub phrase: String,
}

pub trait GroundingDetector: Send + Sync {
    fn name(&self) -> &str;

    fn is_reentrant(&self) -> bool {
        true
    }

    /// Boxes within the image, sorted by descending score.
    fn detect(&self, image: &Image, prompt: &str) -> Result<Vec<Detection>>;
}

pub trait SegmentationModel: Send + Sync {
    fn name(&self) -> &str;

    fn is_reentrant(&self) -> bool {
        true
    }

    /// Pixels a returned mask may extend beyond its prompt box.
    fn padding(&self) -> usize {
        0
    }

    fn segment(&self, image: &Image, bbox: &BoundingBox) -> Result<BinaryMask>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub score_threshold: f64,
    /// `None` keeps every detection above the threshold.
    pub max_instances: Option<usize>,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            score_threshold: 0.35,
            max_instances: None,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::InvalidConfig(format!(
                "score_threshold {} outside [0, 1]",
                self.score_threshold
            )));
        }
        if self.max_instances == Some(0) {
            return Err(Error::InvalidConfig("max_instances must be positive".into()));
        }
        Ok(())
    }
}

/// Detections for `prompt` that pass the policy, best first. An empty
/// result is not an error here.
pub fn ground(
    detector: &dyn GroundingDetector,
    image: &Image,
    prompt: &str,
    policy: &SelectionPolicy,
) -> Result<Vec<Detection>> {
    policy.validate()?;
    if prompt.trim().is_empty() {
        return Err(Error::InvalidPrompts("segmentation prompt is empty".into()));
    }
    let (_, h, w) = image.dim();
    let mut dets = detector.detect(image, prompt)?;
    for d in &dets {
        d.bbox.check_within(h, w).map_err(|e| Error::backend(detector.name(), e))?;
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::backend(detector.name(), format!("score {} outside [0, 1]", d.score)));
        }
    }
    dets.retain(|d| d.score >= policy.score_threshold);
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    if let Some(n) = policy.max_instances {
        dets.truncate(n);
    }
    Ok(dets)
}

pub fn segment_box(
    segmenter: &dyn SegmentationModel,
    image: &Image,
    bbox: &BoundingBox,
) -> Result<BinaryMask> {
    let (_, h, w) = image.dim();
    bbox.check_within(h, w)?;
    let mask = segmenter.segment(image, bbox).map_err(|e| {
        Error::backend(
            segmenter.name(),
            format!(
                "box [{}, {}, {}, {}]: {e}",
                bbox.top, bbox.left, bbox.height, bbox.width
            ),
        )
    })?;
    if mask.dim() != (h, w) {
        return Err(Error::backend(
            segmenter.name(),
            format!("mask {:?} does not match image {h}x{w}", mask.dim()),
        ));
    }
    Ok(mask)
}

/// Union of the segmentations of every selected detection.
///
/// The [`NONE_NEEDED`] prompt yields a full-image mask. No detection above
/// the threshold is an [`Error::ObjectNotFound`] carrying the prompt.
pub fn compute_segmentation_mask(
    detector: &dyn GroundingDetector,
    segmenter: &dyn SegmentationModel,
    image: &Image,
    prompt: &str,
    policy: &SelectionPolicy,
    exec: Execution,
) -> Result<BinaryMask> {
    let (_, h, w) = image.dim();
    if prompt.trim().eq_ignore_ascii_case(NONE_NEEDED) {
        tracing::warn!("segmentation prompt is `{NONE_NEEDED}`; editing the whole image");
        return Ok(BinaryMask::filled(h, w, true));
    }
    let dets = ground(detector, image, prompt, policy)?;
    if dets.is_empty() {
        return Err(Error::ObjectNotFound(prompt.trim().to_string()));
    }
    let masks = exec.try_map(dets.len(), |k| segment_box(segmenter, image, &dets[k].bbox))?;
    let mut out = BinaryMask::filled(h, w, false);
    for m in &masks {
        out = out.union(m)?;
    }
    Ok(out)
}

/// Lowercased word tokens with articles and quantifiers removed and a
/// trailing plural `s` stripped.
fn phrase_tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .filter(|w| !matches!(w.as_str(), "a" | "an" | "the" | "all" | "of" | "and"))
        .map(|w| singular(&w))
        .collect()
}

fn singular(w: &str) -> String {
    if let Some(stem) = w.strip_suffix("es") {
        if stem.ends_with('s') || stem.ends_with('x') || stem.ends_with("ch") || stem.ends_with("sh") {
            return stem.to_string();
        }
    }
    match w.strip_suffix('s') {
        Some(stem) if !stem.ends_with('s') && !stem.ends_with('u') && stem.len() > 1 => stem.to_string(),
        _ => w.to_string(),
    }
}

/// Jaccard overlap of the phrase tokens.
pub fn phrase_similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (phrase_tokens(a), phrase_tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Detector over a known synthetic [`Scene`].
///
/// The score is the phrase similarity between the prompt and a rectangle's
/// label times the rectangle's confidence. The box is recovered from the
/// pixels: the bounding box of the pixels inside the declared rectangle that
/// still carry its fill colour.
#[derive(Debug, Clone)]
pub struct MockDetector {
    scene: Scene,
}

impl MockDetector {
    pub fn new(scene: Scene) -> Self {
        Self { scene }
    }
}

fn same_color(img: &Image, i: usize, j: usize, color: &[f64; 3]) -> bool {
    // within half an 8-bit level, so colours survive a PNG round trip
    (0..3).all(|c| (img[[c, i, j]] - color[c]).abs() <= 0.5 / 255.0 + 1e-9)
}

impl GroundingDetector for MockDetector {
    fn name(&self) -> &str {
        "mock"
    }

    fn detect(&self, image: &Image, prompt: &str) -> Result<Vec<Detection>> {
        let (_, h, w) = image.dim();
        let mut out = Vec::new();
        for r in &self.scene.rects {
            let score = phrase_similarity(prompt, &r.label) * r.confidence;
            if score <= 0.0 {
                continue;
            }
            let b = r.bbox;
            let (mut t, mut l, mut bt, mut rt) = (usize::MAX, usize::MAX, 0, 0);
            for i in b.top..b.bottom().min(h) {
                for j in b.left..b.right().min(w) {
                    if same_color(image, i, j, &r.color) {
                        t = t.min(i);
                        l = l.min(j);
                        bt = bt.max(i + 1);
                        rt = rt.max(j + 1);
                    }
                }
            }
            if t == usize::MAX {
                continue;
            }
            out.push(Detection {
                bbox: BoundingBox::new(t, l, bt - t, rt - l),
                score,
                phrase: r.label.clone(),
            });
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(out)
    }
}

/// Segmenter that returns exactly the box interior.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxSegmenter;

impl SegmentationModel for BoxSegmenter {
    fn name(&self) -> &str {
        "box"
    }

    fn segment(&self, image: &Image, bbox: &BoundingBox) -> Result<BinaryMask> {
        let (_, h, w) = image.dim();
        Ok(BinaryMask::from_fn(h, w, |i, j| bbox.contains(i, j)))
    }
}
