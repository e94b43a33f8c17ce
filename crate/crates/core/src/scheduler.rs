//! Deterministic DDIM transitions: denoising, inversion, partial encoding.
//!
//! Index convention: a step taken from timestep `t` lands on `t - 1`
//! (denoise) or `t + 1` (invert), and the noise prediction is always taken
//! at the source timestep `t`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::StepKind;
use crate::estimators::{checked_predict, NoiseEstimator};
use crate::{Error, Latent, Result};

/// Lower clamp applied to the cumulative alpha before dividing by its root.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Cumulative noise-schedule factors `alpha_bar[0..=T]`, strictly decreasing
/// from `alpha_bar[0] = 1`.
///
/// `model_timesteps[t]` is the timestep the estimator is queried with at
/// schedule position `t`; strided sampling schedules (e.g. 50 DDIM steps
/// over 1000 training steps) map positions onto training timesteps here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    model_timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        let model_timesteps = (0..alphas.len()).collect();
        Self::with_model_timesteps(alphas, model_timesteps)
    }

    pub fn with_model_timesteps(alphas: Vec<f64>, model_timesteps: Vec<usize>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::InvalidSchedule(
                "need at least one step (alphas of length T+1 >= 2)".into(),
            ));
        }
        if model_timesteps.len() != alphas.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} model timesteps for {} alphas",
                model_timesteps.len(),
                alphas.len()
            )));
        }
        if alphas[0] != 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "alphas[0] must be 1.0, got {}",
                alphas[0]
            )));
        }
        if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidSchedule(format!("alpha {a} outside (0, 1]")));
        }
        if let Some(t) = alphas.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "alphas must strictly decrease: alphas[{}]={} >= alphas[{}]={}",
                t + 1,
                alphas[t + 1],
                t,
                alphas[t]
            )));
        }
        Ok(Self {
            alphas,
            model_timesteps,
        })
    }

    /// `alpha_bar[t] = decay^t` for `t = 0..=total_steps`.
    pub fn geometric(total_steps: usize, decay: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidSchedule("total_steps must be positive".into()));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidSchedule(format!("decay {decay} outside (0, 1)")));
        }
        Self::new((0..=total_steps).map(|t| decay.powi(t as i32)).collect())
    }

    /// Scaled-linear beta schedule over `train_steps`, subsampled to
    /// `inference_steps` positions with a stride and a step offset of one.
    /// Position 0 is the clean sample with `alpha_bar = 1`.
    pub fn scaled_linear(
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        inference_steps: usize,
    ) -> Result<Self> {
        if inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::InvalidSchedule(format!(
                "inference steps {inference_steps} must be in 1..={train_steps}"
            )));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let denom = (train_steps.max(2) - 1) as f64;
        let mut cumprod = Vec::with_capacity(train_steps);
        let mut acc = 1.0;
        for i in 0..train_steps {
            let root = s0 + (s1 - s0) * i as f64 / denom;
            acc *= 1.0 - root * root;
            cumprod.push(acc);
        }
        let stride = train_steps / inference_steps;
        let mut alphas = vec![1.0];
        let mut model_timesteps = vec![0];
        for k in 1..=inference_steps {
            let ts = (k - 1) * stride + 1;
            let ts = ts.min(train_steps - 1);
            alphas.push(cumprod[ts]);
            model_timesteps.push(ts);
        }
        Self::with_model_timesteps(alphas, model_timesteps)
    }

    /// Published Stable Diffusion v1 training schedule.
    pub fn stable_diffusion(inference_steps: usize) -> Result<Self> {
        Self::scaled_linear(1000, 0.00085, 0.012, inference_steps)
    }

    #[cfg(test)]
    pub(crate) fn new_unchecked(alphas: Vec<f64>) -> Self {
        let model_timesteps = (0..alphas.len()).collect();
        Self {
            alphas,
            model_timesteps,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas.get(t).copied().ok_or(Error::TimestepOutOfRange {
            t,
            max: self.total_steps(),
        })
    }

    pub fn model_timestep(&self, t: usize) -> Result<usize> {
        self.model_timesteps
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                max: self.total_steps(),
            })
    }

    /// Maps an encoding ratio in `(0, 1]` to `max(1, round(r * T))`.
    pub fn ratio_to_index(&self, ratio: f64) -> Result<usize> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "encoding ratio {ratio} outside (0, 1]"
            )));
        }
        let idx = (ratio * self.total_steps() as f64).round() as usize;
        Ok(idx.clamp(1, self.total_steps()))
    }

    /// Content hash of the alphas and the timestep map.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.alphas {
            h.update(a.to_le_bytes());
        }
        for t in &self.model_timesteps {
            h.update((*t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// A latent tagged with its schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    data: Latent,
    t: usize,
}

impl LatentState {
    pub fn new(data: Latent, t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if t > schedule.total_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: schedule.total_steps(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("latent at t={t}")));
        }
        Ok(Self { data, t })
    }

    pub fn data(&self) -> &Latent {
        &self.data
    }

    pub fn into_data(self) -> Latent {
        self.data
    }

    pub fn t(&self) -> usize {
        self.t
    }
}

/// Clean-sample estimate `(x_t - sqrt(1 - a_t) * eps) / sqrt(a_t)`.
pub fn predicted_x0(x_t: &LatentState, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    if eps.shape() != x_t.data.shape() {
        return Err(Error::shape(x_t.data.shape(), eps.shape()));
    }
    let a = schedule.alpha(x_t.t)?.max(ALPHA_FLOOR);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let mut out = x_t.data.clone();
    ndarray::Zip::from(&mut out)
        .and(eps)
        .for_each(|x, &e| *x = (*x - sn * e) / sa);
    Ok(out)
}

fn transition(
    x_t: &LatentState,
    estimator: &dyn NoiseEstimator,
    caption: &str,
    schedule: &NoiseSchedule,
    target: usize,
    kind: StepKind,
) -> Result<LatentState> {
    let wrap = |e: Error| Error::Step {
        kind,
        t: x_t.t,
        source: Box::new(e),
    };
    let a_next = schedule.alpha(target).map_err(wrap)?;
    let model_t = schedule.model_timestep(x_t.t).map_err(wrap)?;
    let eps = checked_predict(estimator, &x_t.data, caption, model_t).map_err(wrap)?;
    let mut out = predicted_x0(x_t, &eps, schedule).map_err(wrap)?;
    let (sa, sn) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    ndarray::Zip::from(&mut out)
        .and(&eps)
        .for_each(|x, &e| *x = sa * *x + sn * e);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(wrap(Error::NonFinite(format!(
            "output of estimator `{}`",
            estimator.name()
        ))));
    }
    Ok(LatentState {
        data: out,
        t: target,
    })
}

/// One deterministic DDIM step from `t` to `t - 1`.
pub fn ddim_denoise_step(
    x_t: &LatentState,
    estimator: &dyn NoiseEstimator,
    caption: &str,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    if x_t.t == 0 {
        return Err(Error::Step {
            kind: StepKind::Denoise,
            t: 0,
            source: Box::new(Error::InvalidConfig("cannot denoise below t=0".into())),
        });
    }
    transition(x_t, estimator, caption, schedule, x_t.t - 1, StepKind::Denoise)
}

/// One DDIM inversion step from `t` to `t + 1`.
pub fn ddim_invert_step(
    x_t: &LatentState,
    estimator: &dyn NoiseEstimator,
    caption: &str,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    if x_t.t >= schedule.total_steps() {
        return Err(Error::Step {
            kind: StepKind::Invert,
            t: x_t.t,
            source: Box::new(Error::TimestepOutOfRange {
                t: x_t.t + 1,
                max: schedule.total_steps(),
            }),
        });
    }
    transition(x_t, estimator, caption, schedule, x_t.t + 1, StepKind::Invert)
}

/// Runs denoising steps from the state's timestep down to 0.
pub fn denoise_to_zero(
    x: &LatentState,
    estimator: &dyn NoiseEstimator,
    caption: &str,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    let mut y = x.clone();
    while y.t > 0 {
        y = ddim_denoise_step(&y, estimator, caption, schedule)?;
    }
    Ok(y)
}

/// Inversion states `x_0 ..= x_r` produced under one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<LatentState>,
    caption: String,
    ratio: f64,
}

impl Trajectory {
    pub fn caption(&self) -> &str {
        &self.caption
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Timestep of the most-noised state.
    pub fn end(&self) -> usize {
        self.states.len() - 1
    }

    pub fn get(&self, t: usize) -> Option<&LatentState> {
        self.states.get(t)
    }

    pub fn last(&self) -> &LatentState {
        self.states.last().expect("trajectory holds x_0")
    }

    pub fn states(&self) -> &[LatentState] {
        &self.states
    }

    /// Writes `x_0000.npy ..` plus `trajectory.json` into `dir`.
    pub fn save(&self, dir: &Path, schedule: &NoiseSchedule) -> Result<()> {
        fs::create_dir_all(dir)?;
        for s in &self.states {
            crate::pipeline::io::write_npy(&dir.join(format!("x_{:04}.npy", s.t)), &s.data)?;
        }
        let manifest = TrajectoryManifest {
            timesteps: self.states.iter().map(|s| s.t).collect(),
            caption: self.caption.clone(),
            ratio: self.ratio,
            schedule_hash: schedule.fingerprint(),
        };
        crate::pipeline::io::write_atomic(
            &dir.join("trajectory.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )
    }

    /// Loads a trajectory written by [`Trajectory::save`]; the schedule must
    /// match the recorded fingerprint.
    pub fn load(dir: &Path, schedule: &NoiseSchedule) -> Result<Self> {
        let manifest: TrajectoryManifest =
            serde_json::from_slice(&fs::read(dir.join("trajectory.json"))?)?;
        if manifest.schedule_hash != schedule.fingerprint() {
            return Err(Error::InvalidSchedule(
                "trajectory was produced under a different schedule".into(),
            ));
        }
        let mut states = Vec::with_capacity(manifest.timesteps.len());
        for (i, t) in manifest.timesteps.iter().enumerate() {
            if *t != i {
                return Err(Error::InvalidConfig(format!(
                    "trajectory timesteps not contiguous at {i}"
                )));
            }
            let data = crate::pipeline::io::read_npy3(&dir.join(format!("x_{t:04}.npy")))?;
            states.push(LatentState::new(data, *t, schedule)?);
        }
        if states.is_empty() {
            return Err(Error::InvalidConfig("empty trajectory".into()));
        }
        Ok(Self {
            states,
            caption: manifest.caption,
            ratio: manifest.ratio,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryManifest {
    timesteps: Vec<usize>,
    caption: String,
    ratio: f64,
    schedule_hash: String,
}

/// Inverts `x_0` under `caption` to `round(ratio * T)` (at least 1).
pub fn invert_to_ratio(
    x_0: &LatentState,
    estimator: &dyn NoiseEstimator,
    caption: &str,
    ratio: f64,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    let r_idx = schedule.ratio_to_index(ratio)?;
    if x_0.t != 0 {
        return Err(Error::InvalidConfig(format!(
            "inversion must start from t=0, got t={}",
            x_0.t
        )));
    }
    let mut states = Vec::with_capacity(r_idx + 1);
    states.push(x_0.clone());
    for _ in 0..r_idx {
        let next = ddim_invert_step(states.last().unwrap(), estimator, caption, schedule)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        caption: caption.to_string(),
        ratio,
    })
}
