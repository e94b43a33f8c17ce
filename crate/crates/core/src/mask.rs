//! Edit masks and caption-contrast mask estimation.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::estimators::{checked_predict, NoiseEstimator};
use crate::exec::Execution;
use crate::scheduler::{LatentState, NoiseSchedule};
use crate::{Error, Image, Result};

/// Per-cell edit-region indicator, laid out `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(Array2<bool>);

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Self {
        Self(values)
    }

    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Self(Array2::from_elem((h, w), value))
    }

    pub fn from_fn(h: usize, w: usize, f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut f = f;
        Self(Array2::from_shape_fn((h, w), |(i, j)| f(i, j)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.0[[i, j]]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dim() == other.dim() && Zip::from(&self.0).and(&other.0).all(|a, b| !*a || *b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dim() != other.dim() {
            return Err(Error::shape(&[self.dim().0, self.dim().1], &[other.dim().0, other.dim().1]));
        }
        Ok(BinaryMask(Zip::from(&self.0).and(&other.0).map_collect(|a, b| *a || *b)))
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask(self.0.mapv(|v| !v))
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Diffedit,
    #[default]
    Segmenter,
}

impl std::fmt::Display for MaskSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskSource::Diffedit => "diffedit",
            MaskSource::Segmenter => "segmenter",
        })
    }
}

impl std::str::FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffedit" => Ok(MaskSource::Diffedit),
            "segmenter" => Ok(MaskSource::Segmenter),
            other => Err(Error::InvalidConfig(format!("unknown mask source `{other}`"))),
        }
    }
}

/// Real-valued edit-likelihood map in `[0, 1]` before thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    values: Array2<f64>,
    source: MaskSource,
}

impl SoftMask {
    pub fn new(values: Array2<f64>, source: MaskSource) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::OutOfRange(format!("soft mask value {v} outside [0, 1]")));
        }
        Ok(Self { values, source })
    }

    /// Lifts a binary mask (e.g. from the segmenter) to a 0/1 soft mask.
    pub fn from_binary(mask: &BinaryMask, source: MaskSource) -> Self {
        Self {
            values: mask.to_f64(),
            source,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskEstimateConfig {
    pub theta: f64,
    pub n_noise_samples: usize,
    pub noising_ratio: f64,
    pub smoothing_radius: usize,
}

impl Default for MaskEstimateConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            n_noise_samples: 10,
            noising_ratio: 0.5,
            smoothing_radius: 1,
        }
    }
}

impl MaskEstimateConfig {
    pub fn validate(&self) -> Result<()> {
        validate_theta(self.theta)?;
        if self.n_noise_samples == 0 {
            return Err(Error::InvalidConfig("n_noise_samples must be at least 1".into()));
        }
        if !(self.noising_ratio > 0.0 && self.noising_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "noising_ratio {} outside (0, 1)",
                self.noising_ratio
            )));
        }
        Ok(())
    }
}

pub fn validate_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("theta {theta} outside (0, 1)")))
    }
}

/// Caption-contrast soft mask.
///
/// For each seeded sample, `x_0` is noised to `noising_ratio` of the
/// schedule and the absolute difference between the noise predictions under
/// the two captions is averaged over channels. Samples are averaged in index
/// order, the map is box-smoothed and min-max normalized; an all-zero map
/// stays all-zero and a constant non-zero map becomes all-one.
#[allow(clippy::too_many_arguments)]
pub fn estimate_soft_mask(
    x_0: &LatentState,
    input_caption: &str,
    edited_caption: &str,
    cfg: &MaskEstimateConfig,
    estimator: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    seed: u64,
    exec: Execution,
) -> Result<SoftMask> {
    cfg.validate()?;
    if input_caption.trim().is_empty() || edited_caption.trim().is_empty() {
        return Err(Error::InvalidPrompts("captions must be non-empty".into()));
    }
    let t = schedule.ratio_to_index(cfg.noising_ratio)?;
    let alpha = schedule.alpha(t)?;
    let model_t = schedule.model_timestep(t)?;
    let (sa, sn) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let x0 = x_0.data();
    let (_, h, w) = x0.dim();

    let per_sample = exec.try_map(cfg.n_noise_samples, |k| -> Result<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let noise = Array3::from_shape_simple_fn(x0.raw_dim(), || {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let x_t = x0 * sa + noise * sn;
        let eps_i = checked_predict(estimator, &x_t, input_caption, model_t)?;
        let eps_e = checked_predict(estimator, &x_t, edited_caption, model_t)?;
        Ok((eps_i - eps_e)
            .mapv(f64::abs)
            .mean_axis(Axis(0))
            .expect("latent has channels"))
    })?;

    let mut acc = Array2::<f64>::zeros((h, w));
    for m in &per_sample {
        acc += m;
    }
    acc /= cfg.n_noise_samples as f64;
    let smoothed = box_smooth(&acc, cfg.smoothing_radius);
    SoftMask::new(normalize_min_max(smoothed), MaskSource::Diffedit)
}

/// Mean over the `(2r+1)^2` window clipped to the array bounds.
fn box_smooth(a: &Array2<f64>, radius: usize) -> Array2<f64> {
    if radius == 0 {
        return a.clone();
    }
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i0, i1) = (i.saturating_sub(radius), (i + radius).min(h - 1));
        let (j0, j1) = (j.saturating_sub(radius), (j + radius).min(w - 1));
        let mut sum = 0.0;
        for y in i0..=i1 {
            for x in j0..=j1 {
                sum += a[[y, x]];
            }
        }
        sum / ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64
    })
}

fn normalize_min_max(a: Array2<f64>) -> Array2<f64> {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = a.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return Array2::zeros(a.raw_dim());
    }
    if max - min <= 0.0 {
        return Array2::ones(a.raw_dim());
    }
    a.mapv(|v| ((v - min) / (max - min)).clamp(0.0, 1.0))
}

/// `M[p] = soft[p] >= theta`.
pub fn binarize_mask(soft: &SoftMask, theta: f64) -> Result<BinaryMask> {
    validate_theta(theta)?;
    Ok(BinaryMask(soft.values.mapv(|v| v >= theta)))
}

/// Nearest-neighbour resampling (cell centers) to `h x w`.
pub fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidConfig(format!("resize target {h}x{w} has a zero side")));
    }
    let (sh, sw) = mask.dim();
    if sh == 0 || sw == 0 {
        return Err(Error::InvalidConfig("cannot resize an empty mask".into()));
    }
    Ok(BinaryMask::from_fn(h, w, |i, j| {
        let si = ((2 * i + 1) * sh) / (2 * h);
        let sj = ((2 * j + 1) * sw) / (2 * w);
        mask.0[[si.min(sh - 1), sj.min(sw - 1)]]
    }))
}

/// Blends pure red over `image` inside `mask` with weight `alpha`.
pub fn render_overlay(image: &Image, mask: &BinaryMask, alpha: f64) -> Result<Image> {
    let (c, h, w) = image.dim();
    if c != 3 || mask.dim() != (h, w) {
        return Err(Error::shape(&[3, mask.dim().0, mask.dim().1], image.shape()));
    }
    let mut out = image.clone();
    for ((ch, i, j), v) in out.indexed_iter_mut() {
        if mask.0[[i, j]] {
            let red = if ch == 0 { 1.0 } else { 0.0 };
            *v = (1.0 - alpha) * *v + alpha * red;
        }
    }
    Ok(out)
}
