//! Pipeline configuration and per-run overrides.
//!
//! The config file is TOML. Every key is optional:
//!
//! ```toml
//! runs_dir = "runs"
//! profile = "mock"            # mock | local | remote | any registered name
//! mask_source = "segmenter"   # segmenter | diffedit
//! use_describer = false
//! change_eps = 0.02
//! workers = 2
//! max_upload_bytes = 16777216
//!
//! [edit]
//! encoding_ratio = 0.5
//! ddim_steps = 50
//! seed = 0
//! inversion_caption = "input_caption"   # or "empty"
//! pixel_paste_back = false
//! debug_steps = false
//!
//! [schedule]
//! kind = "stable_diffusion"   # or kind = "geometric", decay = 0.9
//!
//! [mask]
//! theta = 0.5
//! n_noise_samples = 10
//! noising_ratio = 0.5
//! smoothing_radius = 1
//!
//! [selection]
//! score_threshold = 0.35
//! max_instances = 3
//!
//! [endpoints]
//! estimator = "http://127.0.0.1:7001"
//! chat = "https://api.example.com/v1"
//! chat_model = "gpt-3.5-turbo"
//! chat_api_key_env = "MASKEDIT_CHAT_API_KEY"
//! timeout_secs = 60
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editor::EditConfig;
use crate::mask::{validate_theta, MaskEstimateConfig, MaskSource};
use crate::scheduler::NoiseSchedule;
use crate::segmenter::SelectionPolicy;
use crate::{Error, Result};

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "MASKEDIT_CONFIG";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// Strided scaled-linear schedule with 1000 training steps.
    #[default]
    StableDiffusion,
    /// `alpha_bar_t = decay^t`.
    Geometric { decay: f64 },
}

impl ScheduleSpec {
    pub fn build(&self, steps: usize) -> Result<NoiseSchedule> {
        match *self {
            Self::StableDiffusion => NoiseSchedule::stable_diffusion(steps),
            Self::Geometric { decay } => NoiseSchedule::geometric(steps, decay),
        }
    }
}

/// Everything that shapes one run; snapshotted into its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: String,
    pub mask_source: MaskSource,
    pub use_describer: bool,
    /// Per-channel threshold for the in-mask change ratio.
    pub change_eps: f64,
    pub edit: EditConfig,
    pub schedule: ScheduleSpec,
    pub mask: MaskEstimateConfig,
    pub selection: SelectionPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: "mock".into(),
            mask_source: MaskSource::Segmenter,
            use_describer: false,
            change_eps: 0.02,
            edit: EditConfig::default(),
            schedule: ScheduleSpec::default(),
            mask: MaskEstimateConfig::default(),
            selection: SelectionPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.edit.validate()?;
        self.mask.validate()?;
        self.selection.validate()?;
        if self.change_eps.is_nan() || self.change_eps <= 0.0 {
            return Err(Error::InvalidConfig("change_eps must be positive".into()));
        }
        self.schedule.build(self.edit.ddim_steps)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Endpoints {
    pub estimator: Option<String>,
    pub codec: Option<String>,
    pub detector: Option<String>,
    pub segmenter: Option<String>,
    pub describer: Option<String>,
    pub perceptual: Option<String>,
    pub embedder: Option<String>,
    /// OpenAI-compatible base URL.
    pub chat: Option<String>,
    pub chat_model: Option<String>,
    /// Name of the environment variable holding the chat API key.
    pub chat_api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub runs_dir: PathBuf,
    /// Service worker pool size.
    pub workers: usize,
    pub max_upload_bytes: usize,
    pub endpoints: Endpoints,
    #[serde(flatten)]
    pub run: RunConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            runs_dir: PathBuf::from("runs"),
            workers: 2,
            max_upload_bytes: 16 * 1024 * 1024,
            endpoints: Endpoints::default(),
            run: RunConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// `explicit`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be positive".into()));
        }
        self.run.validate()
    }
}

/// Partial settings applied on top of a [`RunConfig`]. Used both for new
/// requests and for reruns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoding_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_source: Option<MaskSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ddim_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_paste_back: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_describer: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

impl Overrides {
    /// Checks value ranges without needing a base config.
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.theta {
            validate_theta(t)?;
        }
        if let Some(r) = self.encoding_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidConfig(format!("encoding_ratio {r} outside (0, 1]")));
            }
        }
        if let Some(i) = &self.instruction {
            crate::language::Instruction::new(i)?;
        }
        Ok(())
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        self.validate()?;
        let mut c = base.clone();
        if let Some(t) = self.theta {
            c.mask.theta = t;
        }
        if let Some(r) = self.encoding_ratio {
            c.edit.encoding_ratio = r;
        }
        if let Some(s) = self.mask_source {
            c.mask_source = s;
        }
        if let Some(s) = self.seed {
            c.edit.seed = s;
        }
        if let Some(n) = self.ddim_steps {
            c.edit.ddim_steps = n;
        }
        if let Some(p) = self.pixel_paste_back {
            c.edit.pixel_paste_back = p;
        }
        if let Some(s) = self.score_threshold {
            c.selection.score_threshold = s;
        }
        if let Some(m) = self.max_instances {
            c.selection.max_instances = Some(m);
        }
        if let Some(d) = self.use_describer {
            c.use_describer = d;
        }
        if let Some(p) = &self.profile {
            c.profile = p.clone();
        }
        c.validate()?;
        Ok(c)
    }
}
