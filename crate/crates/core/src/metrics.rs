//! Edit-quality metrics.
//!
//! Two desk-scale metrics need nothing but pixels. The embedding metrics
//! (perceptual distance, CLIP score, CLIP directional similarity) go through
//! adapter traits and are simply absent when no adapter is configured.

use std::sync::Arc;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::{Error, Image, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub out_of_mask_l2: f64,
    pub in_mask_change_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_directional: Option<f64>,
}

fn check_pair(a: &Image, b: &Image, mask: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (_, h, w) = a.dim();
    if mask.dim() != (h, w) {
        return Err(Error::shape(&[h, w], &[mask.dim().0, mask.dim().1]));
    }
    Ok(())
}

/// Mean squared difference over the selected pixels and all channels.
fn region_mse(a: &Image, b: &Image, region: &BinaryMask) -> f64 {
    let n = region.count() * a.dim().0;
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (ac, bc) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))) {
        ndarray::Zip::from(&ac)
            .and(&bc)
            .and(region.as_array())
            .for_each(|&x, &y, &m| {
                if m {
                    sum += (x - y) * (x - y);
                }
            });
    }
    sum / n as f64
}

pub fn out_of_mask_l2(input: &Image, edited: &Image, pixel_mask: &BinaryMask) -> Result<f64> {
    check_pair(input, edited, pixel_mask)?;
    let outside = pixel_mask.complement();
    if outside.is_empty() {
        tracing::warn!("mask covers the whole image; out-of-mask l2 defined as 0");
    }
    Ok(region_mse(input, edited, &outside))
}

/// Mean squared difference inside the mask; the complement-side twin of
/// [`out_of_mask_l2`].
pub fn in_mask_l2(input: &Image, edited: &Image, pixel_mask: &BinaryMask) -> Result<f64> {
    check_pair(input, edited, pixel_mask)?;
    Ok(region_mse(input, edited, pixel_mask))
}

/// Fraction of mask pixels where some channel changed by more than `eps`.
pub fn in_mask_change_ratio(input: &Image, edited: &Image, pixel_mask: &BinaryMask, eps: f64) -> Result<f64> {
    check_pair(input, edited, pixel_mask)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::OutOfRange(format!("eps must be positive, got {eps}")));
    }
    let total = pixel_mask.count();
    if total == 0 {
        tracing::warn!("empty mask; in-mask change ratio defined as 0");
        return Ok(0.0);
    }
    let changed = pixel_mask
        .as_array()
        .indexed_iter()
        .filter(|&(_, &m)| m)
        .filter(|&((i, j), _)| (0..input.dim().0).any(|c| (input[[c, i, j]] - edited[[c, i, j]]).abs() > eps))
        .count();
    Ok(changed as f64 / total as f64)
}

/// Learned perceptual distance between two images (LPIPS-style).
pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Joint image/text embedding space (CLIP-style).
pub trait ImageTextEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Clone, Default)]
pub struct EmbeddingBackends {
    pub perceptual: Option<Arc<dyn PerceptualDistance>>,
    pub embedder: Option<Arc<dyn ImageTextEmbedder>>,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `100 * max(cos(image, text), 0)`.
pub fn clip_score(embedder: &dyn ImageTextEmbedder, image: &Image, text: &str) -> Result<f64> {
    let c = cosine(&embedder.embed_image(image)?, &embedder.embed_text(text)?)?;
    Ok(100.0 * c.max(0.0))
}

/// Cosine between the image embedding delta and the caption embedding delta.
pub fn clip_directional(
    embedder: &dyn ImageTextEmbedder,
    input: &Image,
    edited: &Image,
    input_caption: &str,
    edited_caption: &str,
) -> Result<f64> {
    let di = sub(&embedder.embed_image(edited)?, &embedder.embed_image(input)?);
    let dt = sub(&embedder.embed_text(edited_caption)?, &embedder.embed_text(input_caption)?);
    cosine(&di, &dt)
}

fn logged<T>(metric: &str, r: Result<T>) -> Option<T> {
    r.map_err(|e| tracing::warn!(metric, error = %e, "embedding metric skipped"))
        .ok()
}

/// Fills the embedding fields of `report`. Adapter failures leave the field
/// empty.
pub fn embedding_metrics(
    report: &mut MetricReport,
    input: &Image,
    edited: &Image,
    input_caption: &str,
    edited_caption: &str,
    instruction: &str,
    backends: &EmbeddingBackends,
) {
    if let Some(p) = &backends.perceptual {
        report.lpips = logged("lpips", p.distance(input, edited));
    }
    if let Some(e) = &backends.embedder {
        report.clip_score = logged("clip_score", clip_score(e.as_ref(), edited, instruction));
        report.clip_directional = logged(
            "clip_directional",
            clip_directional(e.as_ref(), input, edited, input_caption, edited_caption),
        );
    }
}

/// Desk-scale metrics for a finished edit. `eps` is the per-channel change
/// threshold for [`in_mask_change_ratio`].
pub fn desk_metrics(input: &Image, edited: &Image, pixel_mask: &BinaryMask, eps: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        out_of_mask_l2: out_of_mask_l2(input, edited, pixel_mask)?,
        in_mask_change_ratio: in_mask_change_ratio(input, edited, pixel_mask, eps)?,
        ..Default::default()
    })
}

/// Reported reference numbers for comparison dashboards. Not reproducible offline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub method: &'static str,
    pub lpips: f64,
    pub clip_score: f64,
    pub clip_directional: f64,
}

pub const REFERENCE_TABLE: [ReferenceRow; 4] = [
    ReferenceRow { method: "MDP-eps_t", lpips: 0.214, clip_score: 26.414, clip_directional: 0.079 },
    ReferenceRow { method: "InstructPix2Pix", lpips: 0.290, clip_score: 25.844, clip_directional: 0.114 },
    ReferenceRow { method: "DiffEdit", lpips: 0.167, clip_score: 26.847, clip_directional: 0.106 },
    ReferenceRow { method: "maskedit", lpips: 0.121, clip_score: 27.404, clip_directional: 0.082 },
];

/// User-study preference rates (percent) for this method against each
/// baseline, on the 10-image set.
pub const REFERENCE_PREFERENCE: [(&str, f64); 3] = [("MDP-eps_t", 83.0), ("InstructPix2Pix", 83.0), ("DiffEdit", 84.5)];

/// Same study on the larger 20-image set.
pub const REFERENCE_PREFERENCE_EXTENDED: [(&str, f64); 3] =
    [("MDP-eps_t", 67.5), ("InstructPix2Pix", 61.0), ("DiffEdit", 57.0)];
