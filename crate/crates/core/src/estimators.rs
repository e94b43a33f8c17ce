//! Noise-estimator and latent-codec contracts, plus analytic toy backends.
//!
//! The toy backends are closed-form, so every property of the sampler, the
//! editor, and the caption-contrast mask can be checked against hand-derived
//! values without model weights.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{s, Array3, Axis, Zip};

use crate::mask::BinaryMask;
use crate::{Error, Image, Latent, Result};

/// Conditional noise predictor `eps(x, caption, t)`.
///
/// `t` is the model timestep (see [`crate::scheduler::NoiseSchedule::model_timestep`]),
/// not the position inside a strided sampling schedule.
pub trait NoiseEstimator: Send + Sync {
    fn name(&self) -> &str;

    /// Identical inputs produce identical outputs.
    fn is_deterministic(&self) -> bool {
        true
    }

    /// Safe to call from several threads at once. Non-reentrant backends are
    /// wrapped in [`Serialized`] by the backend registry.
    fn is_reentrant(&self) -> bool {
        true
    }

    fn predict(&self, x: &Latent, caption: &str, t: usize) -> Result<Latent>;
}

/// Calls `predict` and enforces the contract: same shape, finite values.
pub fn checked_predict(
    estimator: &dyn NoiseEstimator,
    x: &Latent,
    caption: &str,
    t: usize,
) -> Result<Latent> {
    let eps = estimator.predict(x, caption, t)?;
    if eps.shape() != x.shape() {
        return Err(Error::shape(x.shape(), eps.shape()));
    }
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "estimator `{}` at t={t}",
            estimator.name()
        )));
    }
    Ok(eps)
}

/// `eps(x, c, t) = gain * x + bias[c]`, independent of `t`.
///
/// Biases broadcast against the latent (a `[1, 1, 1]` bias is a scalar).
/// Unknown captions get a zero bias.
#[derive(Debug, Clone, Default)]
pub struct ToyLinearEstimator {
    gain: f64,
    caption_bias: HashMap<String, Latent>,
}

impl ToyLinearEstimator {
    pub fn new(gain: f64) -> Self {
        Self {
            gain,
            caption_bias: HashMap::new(),
        }
    }

    pub fn with_bias(self, caption: impl Into<String>, bias: f64) -> Self {
        self.with_bias_array(caption, Array3::from_elem((1, 1, 1), bias))
    }

    pub fn with_bias_array(mut self, caption: impl Into<String>, bias: Latent) -> Self {
        self.caption_bias.insert(caption.into(), bias);
        self
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn bias(&self, caption: &str) -> Option<&Latent> {
        self.caption_bias.get(caption)
    }
}

impl NoiseEstimator for ToyLinearEstimator {
    fn name(&self) -> &str {
        "toy-linear"
    }

    fn predict(&self, x: &Latent, caption: &str, _t: usize) -> Result<Latent> {
        let mut out = x * self.gain;
        if let Some(bias) = self.caption_bias.get(caption) {
            let b = bias
                .broadcast(x.raw_dim())
                .ok_or_else(|| Error::shape(x.shape(), bias.shape()))?;
            out += &b;
        }
        Ok(out)
    }
}

/// Linear, timestep-independent estimator whose caption bias is a
/// deterministic pseudo-random field derived from the caption text.
///
/// Used by the `mock` backend profile: any two distinct captions give a
/// spatially varying prediction difference, which keeps the caption-contrast
/// mask non-trivial without a model.
#[derive(Debug, Clone)]
pub struct CaptionHashEstimator {
    gain: f64,
    amplitude: f64,
}

impl CaptionHashEstimator {
    pub fn new(gain: f64, amplitude: f64) -> Self {
        Self { gain, amplitude }
    }

    pub fn bias_for(&self, caption: &str, shape: (usize, usize, usize)) -> Latent {
        let seed = fnv1a(caption.as_bytes());
        Array3::from_shape_fn(shape, |(c, i, j)| {
            let idx = ((c * shape.1 + i) * shape.2 + j) as u64;
            self.amplitude * (unit_hash(seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)) - 0.5)
        })
    }
}

impl Default for CaptionHashEstimator {
    fn default() -> Self {
        Self::new(0.0, 1.0)
    }
}

impl NoiseEstimator for CaptionHashEstimator {
    fn name(&self) -> &str {
        "caption-hash"
    }

    fn predict(&self, x: &Latent, caption: &str, _t: usize) -> Result<Latent> {
        let bias = self.bias_for(caption, x.dim());
        Ok(x * self.gain + bias)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// splitmix64 finalizer mapped to `[0, 1)`.
fn unit_hash(mut z: u64) -> f64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Wraps a base estimator so that the edited caption differs from the input
/// caption by exactly `delta` inside `support` and by zero outside.
pub struct RegionToyEstimator {
    base: Arc<dyn NoiseEstimator>,
    input_caption: String,
    edited_caption: String,
    support: BinaryMask,
    delta: f64,
}

impl RegionToyEstimator {
    pub fn new(
        base: Arc<dyn NoiseEstimator>,
        input_caption: impl Into<String>,
        edited_caption: impl Into<String>,
        support: BinaryMask,
        delta: f64,
    ) -> Self {
        Self {
            base,
            input_caption: input_caption.into(),
            edited_caption: edited_caption.into(),
            support,
            delta,
        }
    }

    pub fn support(&self) -> &BinaryMask {
        &self.support
    }
}

impl NoiseEstimator for RegionToyEstimator {
    fn name(&self) -> &str {
        "region-toy"
    }

    fn is_deterministic(&self) -> bool {
        self.base.is_deterministic()
    }

    fn predict(&self, x: &Latent, caption: &str, t: usize) -> Result<Latent> {
        if caption != self.edited_caption || self.edited_caption == self.input_caption {
            return self.base.predict(x, caption, t);
        }
        let (_, h, w) = x.dim();
        if self.support.dim() != (h, w) {
            return Err(Error::shape(&[h, w], &[self.support.dim().0, self.support.dim().1]));
        }
        let mut out = self.base.predict(x, &self.input_caption, t)?;
        for mut channel in out.axis_iter_mut(Axis(0)) {
            Zip::from(&mut channel)
                .and(self.support.as_array())
                .for_each(|v, &m| {
                    if m {
                        *v += self.delta;
                    }
                });
        }
        Ok(out)
    }
}

/// Serializes calls into an estimator that is not safe to share.
pub struct Serialized<T> {
    inner: T,
    lock: Arc<Mutex<()>>,
}

impl<T> Serialized<T> {
    pub fn new(inner: T, lock: Arc<Mutex<()>>) -> Self {
        Self { inner, lock }
    }

    pub(crate) fn guard(&self) -> std::sync::MutexGuard<'_, ()> {
        self.lock.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn inner(&self) -> &T {
        &self.inner
    }
}

impl NoiseEstimator for Serialized<Arc<dyn NoiseEstimator>> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }

    fn is_reentrant(&self) -> bool {
        true
    }

    fn predict(&self, x: &Latent, caption: &str, t: usize) -> Result<Latent> {
        let _g = self.guard();
        self.inner.predict(x, caption, t)
    }
}

/// Encoder/decoder between RGB images and the estimator's latent space.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;

    fn latent_channels(&self) -> usize;

    /// Spatial reduction factor between pixels and latent cells.
    fn downscale(&self) -> usize;

    /// Upper bound on the mean squared error of `decode(encode(img))` for
    /// images in `[0, 1]`.
    fn reconstruction_mse_bound(&self) -> f64;

    fn is_reentrant(&self) -> bool {
        true
    }

    fn encode(&self, image: &Image) -> Result<Latent>;

    fn decode(&self, latent: &Latent) -> Result<Image>;
}

/// Checks the `[3, H, W]` layout and the `[0, 1]` value range.
pub fn validate_image(image: &Image) -> Result<()> {
    if image.dim().0 != 3 {
        return Err(Error::shape(
            &[3, image.dim().1, image.dim().2],
            image.shape(),
        ));
    }
    if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange(format!(
            "image value {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Pixel space is the latent space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn name(&self) -> &str {
        "identity"
    }

    fn latent_channels(&self) -> usize {
        3
    }

    fn downscale(&self) -> usize {
        1
    }

    fn reconstruction_mse_bound(&self) -> f64 {
        0.0
    }

    fn encode(&self, image: &Image) -> Result<Latent> {
        validate_image(image)?;
        Ok(image.clone())
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        if latent.dim().0 != 3 {
            return Err(Error::shape(&[3, latent.dim().1, latent.dim().2], latent.shape()));
        }
        Ok(latent.mapv(|v| v.clamp(0.0, 1.0)))
    }
}

/// Downsampling mock codec: latent channels 0..3 hold the blockwise means of
/// R, G, B, channel 3 holds the blockwise luminance mean. Decoding upsamples
/// the first three channels, so a round trip yields the blockwise-mean image.
#[derive(Debug, Clone, Copy)]
pub struct BlockMeanCodec {
    factor: usize,
}

impl BlockMeanCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidConfig("block factor must be positive".into()));
        }
        Ok(Self { factor })
    }
}

impl Default for BlockMeanCodec {
    fn default() -> Self {
        Self { factor: 8 }
    }
}

impl LatentCodec for BlockMeanCodec {
    fn name(&self) -> &str {
        "block-mean"
    }

    fn latent_channels(&self) -> usize {
        4
    }

    fn downscale(&self) -> usize {
        self.factor
    }

    fn reconstruction_mse_bound(&self) -> f64 {
        // a block of values in [0, 1] deviates from its mean by at most 1/2
        0.25
    }

    fn encode(&self, image: &Image) -> Result<Latent> {
        validate_image(image)?;
        let (_, h, w) = image.dim();
        let f = self.factor;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Image(format!(
                "image {h}x{w} is not a positive multiple of the codec block {f}"
            )));
        }
        let (lh, lw) = (h / f, w / f);
        let mut latent = Array3::zeros((4, lh, lw));
        for c in 0..3 {
            for i in 0..lh {
                for j in 0..lw {
                    let block = image.slice(s![c, i * f..(i + 1) * f, j * f..(j + 1) * f]);
                    latent[[c, i, j]] = block.sum() / (f * f) as f64;
                }
            }
        }
        for i in 0..lh {
            for j in 0..lw {
                latent[[3, i, j]] = 0.299 * latent[[0, i, j]]
                    + 0.587 * latent[[1, i, j]]
                    + 0.114 * latent[[2, i, j]];
            }
        }
        Ok(latent)
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let (c, lh, lw) = latent.dim();
        if c != 4 {
            return Err(Error::shape(&[4, lh, lw], latent.shape()));
        }
        let f = self.factor;
        Ok(Array3::from_shape_fn((3, lh * f, lw * f), |(ch, y, x)| {
            latent[[ch, y / f, x / f]].clamp(0.0, 1.0)
        }))
    }
}

impl LatentCodec for Serialized<Arc<dyn LatentCodec>> {
    fn name(&self) -> &str {
        self.inner().name()
    }

    fn latent_channels(&self) -> usize {
        self.inner().latent_channels()
    }

    fn downscale(&self) -> usize {
        self.inner().downscale()
    }

    fn reconstruction_mse_bound(&self) -> f64 {
        self.inner().reconstruction_mse_bound()
    }

    fn encode(&self, image: &Image) -> Result<Latent> {
        let _g = self.guard();
        self.inner().encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let _g = self.guard();
        self.inner().decode(latent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn toy_linear_direct_form() {
        let est = ToyLinearEstimator::new(0.5).with_bias("cat", 0.1);
        let x = Array3::from_elem((1, 1, 1), 2.0);
        let eps = est.predict(&x, "cat", 3).unwrap();
        assert_abs_diff_eq!(eps[[0, 0, 0]], 1.1, epsilon = 1e-15);
        // unknown caption, zero bias
        let eps = est.predict(&x, "dog", 3).unwrap();
        assert_eq!(eps[[0, 0, 0]], 1.0);
    }

    #[test]
    fn toy_linear_is_caption_sensitive() {
        let est = ToyLinearEstimator::new(0.3)
            .with_bias("a", 0.2)
            .with_bias("b", -0.2);
        let x = Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c + i * j) as f64 * 0.1);
        let a = est.predict(&x, "a", 0).unwrap();
        let b = est.predict(&x, "b", 0).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p != q));
    }

    #[test]
    fn toy_linear_rejects_unbroadcastable_bias() {
        let est = ToyLinearEstimator::new(0.0).with_bias_array("a", Array3::zeros((2, 5, 5)));
        let x = Array3::zeros((4, 8, 8));
        assert!(matches!(
            est.predict(&x, "a", 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn region_toy_difference_is_delta_on_support() {
        let support = BinaryMask::from_fn(8, 8, |_, j| j < 4);
        let base: Arc<dyn NoiseEstimator> = Arc::new(
            ToyLinearEstimator::new(0.7)
                .with_bias("in", 0.3)
                .with_bias("out", -2.0),
        );
        let est = RegionToyEstimator::new(base, "in", "out", support, 1.0);
        let x = Array3::from_shape_fn((4, 8, 8), |(c, i, j)| ((c * 31 + i * 7 + j) % 5) as f64);
        let e = est.predict(&x, "out", 5).unwrap();
        let i = est.predict(&x, "in", 5).unwrap();
        let d = &e - &i;
        for ((_, _, j), v) in d.indexed_iter() {
            if j < 4 {
                assert!((v - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn caption_hash_is_deterministic_and_caption_sensitive() {
        let est = CaptionHashEstimator::default();
        let x = Array3::zeros((4, 8, 8));
        let a1 = est.predict(&x, "Photo of a dog", 1).unwrap();
        let a2 = est.predict(&x, "Photo of a dog", 1).unwrap();
        let b = est.predict(&x, "Photo of a cat", 1).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert!(a1.iter().all(|v| (-0.5..0.5).contains(v)));
    }

    #[test]
    fn checked_predict_rejects_non_finite() {
        struct Broken;
        impl NoiseEstimator for Broken {
            fn name(&self) -> &str {
                "broken"
            }
            fn predict(&self, x: &Latent, _: &str, _: usize) -> Result<Latent> {
                Ok(x.mapv(|_| f64::NAN))
            }
        }
        let err = checked_predict(&Broken, &Array3::zeros((1, 2, 2)), "c", 0).unwrap_err();
        assert!(err.to_string().contains("broken"));
    }

    #[test]
    fn identity_codec_roundtrip_is_exact() {
        let img = Array3::from_shape_fn((3, 64, 64), |(c, i, j)| ((c * 64 + i * 3 + j) % 256) as f64 / 255.0);
        let codec = IdentityCodec;
        let latent = codec.encode(&img).unwrap();
        assert_eq!(latent.dim(), (3, 64, 64));
        assert_eq!(codec.decode(&latent).unwrap(), img);
    }

    #[test]
    fn block_mean_roundtrip_matches_blockwise_mean() {
        let img = Array3::from_shape_fn((3, 64, 64), |(c, i, j)| ((c * 17 + i * 5 + j * 3) % 97) as f64 / 96.0);
        let codec = BlockMeanCodec::new(8).unwrap();
        let latent = codec.encode(&img).unwrap();
        assert_eq!(latent.dim(), (4, 8, 8));
        let back = codec.decode(&latent).unwrap();
        // independent oracle: average each 8x8 block by direct summation
        for c in 0..3 {
            for bi in 0..8 {
                for bj in 0..8 {
                    let mut sum = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            sum += img[[c, bi * 8 + y, bj * 8 + x]];
                        }
                    }
                    let mean = sum / 64.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            assert_abs_diff_eq!(back[[c, bi * 8 + y, bj * 8 + x]], mean, epsilon = 1e-12);
                        }
                    }
                }
            }
        }
        let mse = (&back - &img).mapv(|v| v * v).mean().unwrap();
        assert!(mse <= codec.reconstruction_mse_bound());
    }

    #[test]
    fn codec_rejects_bad_input() {
        let mut img = Array3::from_elem((3, 8, 8), 0.5);
        img[[1, 2, 2]] = 1.5;
        assert!(matches!(IdentityCodec.encode(&img), Err(Error::OutOfRange(_))));
        let four = Array3::from_elem((4, 8, 8), 0.5);
        assert!(matches!(IdentityCodec.encode(&four), Err(Error::ShapeMismatch { .. })));
        let odd = Array3::from_elem((3, 9, 8), 0.5);
        assert!(BlockMeanCodec::new(8).unwrap().encode(&odd).is_err());
    }

    #[test]
    fn region_support_dims_checked() {
        let support = BinaryMask::new(Array2::from_elem((4, 4), true));
        let base: Arc<dyn NoiseEstimator> = Arc::new(ToyLinearEstimator::new(0.0));
        let est = RegionToyEstimator::new(base, "a", "b", support, 1.0);
        assert!(est.predict(&Array3::zeros((1, 8, 8)), "b", 0).is_err());
    }
}
