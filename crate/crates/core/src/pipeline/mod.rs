//! Run orchestration: instruction parsing, masking and editing, with every
//! intermediate persisted in the run directory.
//!
//! ```text
//! runs/<id>/
//!   manifest.json      status, prompts, config, artifact hashes, timings, metrics
//!   config.json        run config snapshot
//!   input.png  scene.json (mock geometry, optional)
//!   transcript.json    describer and chat exchanges
//!   soft_mask.npy      soft mask at its native resolution
//!   soft_mask.png  mask.png  mask_overlay.png
//!   edited.png  edited_latent.npy
//!   debug/step_XXXX.{npy,png}   with edit.debug_steps
//! ```

pub mod config;
pub mod io;
pub mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::Utc;
use ndarray::Array2;

use crate::backends::{BackendContext, BackendRegistry, BackendSet};
use crate::editor::mask_guided_edit_observed;
use crate::language::{
    build_task_prompt, describe_image, fallback_parse, parse_llm_response, Instruction, PromptTemplate, Transcript,
};
use crate::mask::{binarize_mask, estimate_soft_mask, render_overlay, resize_mask, BinaryMask, MaskSource, SoftMask};
use crate::metrics::{desk_metrics, embedding_metrics};
use crate::scheduler::LatentState;
use crate::segmenter::compute_segmentation_mask;
use crate::synthetic::{sidecar_path, Scene};
use crate::{Error, Execution, Image, Result};

pub use config::{Overrides, PipelineConfig, RunConfig, CONFIG_ENV};
pub use store::{EditRun, FsRunStore, PromptSource, ReusePlan, RunError, RunStatus, RunStore};

pub const INPUT: &str = "input.png";
pub const SCENE: &str = "scene.json";
pub const CONFIG: &str = "config.json";
pub const TRANSCRIPT: &str = "transcript.json";
pub const SOFT_MASK: &str = "soft_mask.npy";
pub const SOFT_MASK_PNG: &str = "soft_mask.png";
pub const MASK: &str = "mask.png";
pub const MASK_OVERLAY: &str = "mask_overlay.png";
pub const EDITED: &str = "edited.png";
pub const EDITED_LATENT: &str = "edited_latent.npy";

/// Overlay weight for the red mask rendering.
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: ImageRef,
    pub instruction: String,
    pub overrides: Overrides,
    /// Geometry for the mock detector. For path inputs the
    /// `<stem>.scene.json` sidecar is used when this is absent.
    pub scene: Option<Scene>,
    /// Stop after masking.
    pub mask_only: bool,
}

impl EditRequest {
    pub fn from_path(path: impl Into<PathBuf>, instruction: &str) -> Self {
        Self {
            image: ImageRef::Path(path.into()),
            instruction: instruction.to_string(),
            overrides: Overrides::default(),
            scene: None,
            mask_only: false,
        }
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    registry: Arc<BackendRegistry>,
    store: Arc<dyn RunStore>,
    template: PromptTemplate,
    exec: Execution,
}

fn new_run_id() -> String {
    format!(
        "{}-{:06x}",
        Utc::now().format("%Y%m%dT%H%M%S%3fZ"),
        rand::random::<u32>() & 0xff_ffff
    )
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(v)?)
}

/// Nearest-neighbour resampling of a value map, same cell-centre rule as
/// [`resize_mask`].
fn upsample_values(values: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = values.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        values[[(((2 * i + 1) * sh) / (2 * h)).min(sh - 1), (((2 * j + 1) * sw) / (2 * w)).min(sw - 1)]]
    })
}

fn mask_from_png(bytes: &[u8]) -> Result<BinaryMask> {
    let img = io::decode_image(bytes)?;
    Ok(BinaryMask::new(img.index_axis(ndarray::Axis(0), 0).mapv(|v| v >= 0.5)))
}

/// Stage bookkeeping while a run executes.
struct Exec<'a> {
    pipeline: &'a Pipeline,
    run: EditRun,
}

impl Exec<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let rec = self.pipeline.store.put_artifact(&self.run.id, name, bytes)?;
        self.run.artifacts.insert(name.to_string(), rec);
        Ok(())
    }

    fn copy_from_parent(&mut self, name: &str) -> Result<Vec<u8>> {
        let parent = self.run.parent_id.clone().expect("reuse implies a parent");
        let bytes = self.pipeline.store.read_artifact(&parent, name)?;
        self.put(name, &bytes)?;
        Ok(bytes)
    }

    fn advance(&mut self, status: RunStatus) -> Result<()> {
        self.run.status = status;
        self.pipeline.store.update(&self.run)
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, registry: BackendRegistry) -> Result<Self> {
        config.validate()?;
        let store = Arc::new(FsRunStore::new(&config.runs_dir)?);
        Ok(Self::with_store(config, Arc::new(registry), store))
    }

    pub fn with_store(config: PipelineConfig, registry: Arc<BackendRegistry>, store: Arc<dyn RunStore>) -> Self {
        Self {
            config,
            registry,
            store,
            template: PromptTemplate::default(),
            exec: Execution::default(),
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<dyn RunStore> {
        &self.store
    }

    pub fn registry(&self) -> &BackendRegistry {
        &self.registry
    }

    pub fn get_run(&self, id: &str) -> Result<EditRun> {
        self.store.read(id)
    }

    pub fn artifact_path(&self, id: &str, name: &str) -> Result<PathBuf> {
        self.store.artifact_path(id, name)
    }

    /// Validates the request and persists a run in `parsing` state.
    pub fn create_run(&self, req: &EditRequest) -> Result<EditRun> {
        let instruction = Instruction::new(&req.instruction)?;
        let config = req.overrides.apply(&self.config.run)?;
        if !self.registry.contains(&config.profile) {
            return Err(Error::InvalidConfig(format!("unknown backend profile `{}`", config.profile)));
        }
        let (bytes, sidecar) = match &req.image {
            ImageRef::Path(p) => (std::fs::read(p)?, Some(sidecar_path(p))),
            ImageRef::Bytes(b) => (b.clone(), None),
        };
        let image = io::decode_image(&bytes)?;
        let scene = match (&req.scene, sidecar) {
            (Some(s), _) => Some(s.clone()),
            (None, Some(p)) if p.exists() => Some(Scene::load(&p)?),
            _ => None,
        };
        if let Some(s) = &scene {
            s.validate()?;
            if (s.height, s.width) != (image.dim().1, image.dim().2) {
                return Err(Error::InvalidConfig("scene size does not match the image".into()));
            }
        }
        let mut run = EditRun {
            id: new_run_id(),
            parent_id: None,
            created_at: Utc::now().to_rfc3339(),
            status: RunStatus::Parsing,
            mask_only: req.mask_only,
            instruction: instruction.as_str().to_string(),
            config,
            overrides: (req.overrides != Overrides::default()).then(|| req.overrides.clone()),
            reuse: ReusePlan::Full,
            prompts: None,
            prompt_source: None,
            description: None,
            mask_source: None,
            backends: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            metrics: None,
            error: None,
        };
        self.store.create(&run)?;
        let mut ex = Exec { pipeline: self, run };
        ex.put(INPUT, &io::encode_png(&image)?)?;
        if let Some(s) = &scene {
            ex.put(SCENE, s.to_json()?.as_bytes())?;
        }
        let cfg = json_bytes(&ex.run.config)?;
        ex.put(CONFIG, &cfg)?;
        run = ex.run;
        self.store.update(&run)?;
        Ok(run)
    }

    /// Creates a child run of `parent_id`, deciding what it can reuse.
    pub fn create_rerun(&self, parent_id: &str, overrides: &Overrides) -> Result<EditRun> {
        overrides.validate()?;
        let parent = self.store.read(parent_id)?;
        if !parent.has_artifact(INPUT) {
            return Err(Error::NotReusable(parent_id.to_string(), "parent has no input image".into()));
        }
        let config = overrides.apply(&parent.config)?;
        if !self.registry.contains(&config.profile) {
            return Err(Error::InvalidConfig(format!("unknown backend profile `{}`", config.profile)));
        }
        let instruction = match &overrides.instruction {
            Some(i) => Instruction::new(i)?.as_str().to_string(),
            None => parent.instruction.clone(),
        };
        let same_masking_inputs = config.mask_source == parent.config.mask_source
            && config.profile == parent.config.profile
            && config.selection == parent.config.selection
            && (config.mask_source == MaskSource::Segmenter
                || (config.mask.n_noise_samples == parent.config.mask.n_noise_samples
                    && config.mask.noising_ratio == parent.config.mask.noising_ratio
                    && config.mask.smoothing_radius == parent.config.mask.smoothing_radius
                    && config.edit.seed == parent.config.edit.seed
                    && config.edit.ddim_steps == parent.config.edit.ddim_steps
                    && config.schedule == parent.config.schedule));
        let reuse = if instruction != parent.instruction || parent.prompts.is_none() {
            if parent.prompts.is_none() {
                tracing::warn!(parent = parent_id, "parent never finished parsing; rerunning from scratch");
            }
            ReusePlan::Full
        } else if !same_masking_inputs || !parent.has_artifact(SOFT_MASK) {
            ReusePlan::Prompts
        } else if config.mask.theta != parent.config.mask.theta || !parent.has_artifact(MASK) {
            ReusePlan::SoftMask
        } else {
            ReusePlan::BinaryMask
        };
        let run = EditRun {
            id: new_run_id(),
            parent_id: Some(parent.id.clone()),
            created_at: Utc::now().to_rfc3339(),
            status: RunStatus::Parsing,
            mask_only: false,
            instruction,
            config,
            overrides: Some(overrides.clone()),
            reuse,
            prompts: None,
            prompt_source: None,
            description: None,
            mask_source: None,
            backends: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            metrics: None,
            error: None,
        };
        self.store.create(&run)?;
        let mut ex = Exec { pipeline: self, run };
        ex.copy_from_parent(INPUT)?;
        if parent.has_artifact(SCENE) {
            ex.copy_from_parent(SCENE)?;
        }
        let cfg = json_bytes(&ex.run.config)?;
        ex.put(CONFIG, &cfg)?;
        self.store.update(&ex.run)?;
        Ok(ex.run)
    }

    pub fn run_edit(&self, req: &EditRequest) -> Result<EditRun> {
        let run = self.create_run(req)?;
        self.execute(&run.id)
    }

    pub fn rerun_with_overrides(&self, run_id: &str, overrides: &Overrides) -> Result<EditRun> {
        let run = self.create_rerun(run_id, overrides)?;
        self.execute(&run.id)
    }

    /// Runs the remaining stages of a created run. Stage failures are
    /// recorded in the returned run; `Err` means the store itself failed.
    pub fn execute(&self, id: &str) -> Result<EditRun> {
        let run = self.store.read(id)?;
        if run.status != RunStatus::Parsing {
            return Err(Error::InvalidConfig(format!("run {id} already executed")));
        }
        let mut ex = Exec { pipeline: self, run };
        if let Err(e) = self.stages(&mut ex) {
            let stage = ex.run.status.as_str().to_string();
            tracing::warn!(run = %ex.run.id, stage, "run failed: {e}");
            ex.run.error = Some(RunError {
                stage,
                message: e.to_string(),
                user_facing: e.is_user_facing(),
            });
            ex.advance(RunStatus::Failed)?;
        }
        Ok(ex.run)
    }

    fn stages(&self, ex: &mut Exec<'_>) -> Result<()> {
        let started = Instant::now();
        let input = io::decode_image(&self.store.read_artifact(&ex.run.id, INPUT)?)?;
        let scene = if ex.run.has_artifact(SCENE) {
            Some(Scene::from_json(std::str::from_utf8(&self.store.read_artifact(&ex.run.id, SCENE)?)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?)?)
        } else {
            None
        };
        let ctx = BackendContext {
            scene,
            endpoints: self.config.endpoints.clone(),
        };
        let backends = self.registry.build(&ex.run.config.profile, &ctx)?;
        ex.run.backends = backends.names();
        let parent = match (&ex.run.parent_id, ex.run.reuse) {
            (Some(p), plan) if plan != ReusePlan::Full => Some(self.store.read(p)?),
            _ => None,
        };

        self.parse_stage(ex, &input, &backends, parent.as_ref())?;
        ex.run.timings.insert("parsing".into(), started.elapsed().as_secs_f64());
        ex.advance(RunStatus::Masking)?;

        let started = Instant::now();
        let pixel_mask = self.mask_stage(ex, &input, &backends, parent.as_ref())?;
        ex.run.timings.insert("masking".into(), started.elapsed().as_secs_f64());
        if ex.run.mask_only {
            return ex.advance(RunStatus::Masked);
        }
        ex.advance(RunStatus::Editing)?;

        let started = Instant::now();
        self.edit_stage(ex, &input, &pixel_mask, &backends)?;
        ex.run.timings.insert("editing".into(), started.elapsed().as_secs_f64());
        ex.advance(RunStatus::Done)
    }

    fn parse_stage(&self, ex: &mut Exec<'_>, input: &Image, backends: &BackendSet, parent: Option<&EditRun>) -> Result<()> {
        if let Some(p) = parent {
            ex.run.prompts = p.prompts.clone();
            ex.run.description = p.description.clone();
            ex.run.prompt_source = Some(PromptSource::Parent);
            if p.has_artifact(TRANSCRIPT) {
                ex.copy_from_parent(TRANSCRIPT)?;
            }
            return Ok(());
        }
        let instruction = Instruction::new(&ex.run.instruction)?;
        let mut transcript = Transcript::default();
        let description = match (&backends.describer, ex.run.config.use_describer) {
            (Some(d), true) => describe_image(input, d.as_ref(), &mut transcript),
            (None, true) => {
                tracing::warn!("describer requested but the profile has none");
                None
            }
            _ => None,
        };
        let prompt = build_task_prompt(&instruction, description.as_ref(), &self.template);
        let reply = backends.chat.complete(&prompt);
        transcript.record(backends.chat.name(), &prompt, &reply);
        let parsed = reply.and_then(|r| parse_llm_response(&r));
        let (prompts, source) = match parsed {
            Ok(p) => (p, PromptSource::Chat),
            Err(e) => match fallback_parse(&instruction) {
                Ok(p) => {
                    tracing::warn!("chat answer unusable ({e}); using the pattern parser");
                    (p, PromptSource::Fallback)
                }
                Err(_) => {
                    ex.put(TRANSCRIPT, &json_bytes(&transcript)?)?;
                    return Err(e);
                }
            },
        };
        ex.put(TRANSCRIPT, &json_bytes(&transcript)?)?;
        ex.run.prompts = Some(prompts);
        ex.run.prompt_source = Some(source);
        ex.run.description = description;
        Ok(())
    }

    /// Produces soft/binary mask artifacts and returns the pixel mask.
    fn mask_stage(&self, ex: &mut Exec<'_>, input: &Image, backends: &BackendSet, parent: Option<&EditRun>) -> Result<BinaryMask> {
        let (_, h, w) = input.dim();
        let cfg = ex.run.config.clone();
        let prompts = ex.run.prompts.clone().expect("parsed before masking");

        if let (Some(p), ReusePlan::BinaryMask) = (parent, ex.run.reuse) {
            ex.run.mask_source = p.mask_source;
            ex.copy_from_parent(SOFT_MASK)?;
            if p.has_artifact(SOFT_MASK_PNG) {
                ex.copy_from_parent(SOFT_MASK_PNG)?;
            }
            let mask = mask_from_png(&ex.copy_from_parent(MASK)?)?;
            if p.has_artifact(MASK_OVERLAY) {
                ex.copy_from_parent(MASK_OVERLAY)?;
            }
            return Ok(mask);
        }

        let soft = match (parent, ex.run.reuse) {
            (Some(p), ReusePlan::SoftMask) => {
                let bytes = ex.copy_from_parent(SOFT_MASK)?;
                if p.has_artifact(SOFT_MASK_PNG) {
                    ex.copy_from_parent(SOFT_MASK_PNG)?;
                }
                let values = io::read_npy2(&self.store.artifact_path(&ex.run.id, SOFT_MASK)?)?;
                debug_assert_eq!(io::sha256_hex(&bytes), ex.run.artifacts[SOFT_MASK].sha256);
                SoftMask::new(values, p.mask_source.unwrap_or(cfg.mask_source))?
            }
            _ => {
                let soft = match cfg.mask_source {
                    MaskSource::Segmenter => {
                        let m = compute_segmentation_mask(
                            backends.detector.as_ref(),
                            backends.segmenter.as_ref(),
                            input,
                            &prompts.segmentation_prompt,
                            &cfg.selection,
                            self.exec,
                        )?;
                        SoftMask::from_binary(&m, MaskSource::Segmenter)
                    }
                    MaskSource::Diffedit => {
                        let schedule = cfg.schedule.build(cfg.edit.ddim_steps)?;
                        let latent = backends.codec.encode(input)?;
                        let x0 = LatentState::new(latent, 0, &schedule)?;
                        estimate_soft_mask(
                            &x0,
                            &prompts.input_caption,
                            &prompts.edited_caption,
                            &cfg.mask,
                            backends.estimator.as_ref(),
                            &schedule,
                            cfg.edit.seed,
                            self.exec,
                        )?
                    }
                };
                ex.put(SOFT_MASK, &io::npy_bytes2(soft.values())?)?;
                ex.put(SOFT_MASK_PNG, &io::encode_png(&io::gray_to_image(&upsample_values(soft.values(), h, w)))?)?;
                soft
            }
        };
        ex.run.mask_source = Some(soft.source());
        let native = binarize_mask(&soft, cfg.mask.theta)?;
        let pixel_mask = resize_mask(&native, h, w)?;
        ex.put(MASK, &io::encode_png(&io::gray_to_image(&pixel_mask.to_f64()))?)?;
        ex.put(MASK_OVERLAY, &io::encode_png(&render_overlay(input, &pixel_mask, OVERLAY_ALPHA)?)?)?;
        Ok(pixel_mask)
    }

    fn edit_stage(&self, ex: &mut Exec<'_>, input: &Image, pixel_mask: &BinaryMask, backends: &BackendSet) -> Result<()> {
        let cfg = ex.run.config.clone();
        let prompts = ex.run.prompts.clone().expect("parsed before editing");
        let schedule = cfg.schedule.build(cfg.edit.ddim_steps)?;
        let latent = backends.codec.encode(input)?;
        let (_, lh, lw) = latent.dim();
        let latent_mask = resize_mask(pixel_mask, lh, lw)?;
        let x0 = LatentState::new(latent, 0, &schedule)?;

        let mut debug: Vec<(usize, ndarray::Array3<f64>)> = Vec::new();
        let edited_latent = mask_guided_edit_observed(
            &x0,
            &latent_mask,
            &prompts.input_caption,
            &prompts.edited_caption,
            &cfg.edit,
            backends.estimator.as_ref(),
            &schedule,
            &mut |t, y| {
                if cfg.edit.debug_steps {
                    debug.push((t, y.clone()));
                }
                Ok(())
            },
        )?;
        for (t, y) in &debug {
            ex.put(&format!("debug/step_{t:04}.npy"), &io::npy_bytes3(y)?)?;
            ex.put(&format!("debug/step_{t:04}.png"), &io::encode_png(&backends.codec.decode(y)?)?)?;
        }

        let decoded = backends.codec.decode(edited_latent.data())?;
        if decoded.dim() != input.dim() {
            return Err(Error::shape(input.shape(), decoded.shape()));
        }
        let edited = if cfg.edit.pixel_paste_back {
            crate::editor::masked_blend(&decoded, input, pixel_mask)?
        } else {
            decoded
        };
        let png = io::encode_png(&edited)?;
        ex.put(EDITED, &png)?;
        ex.put(EDITED_LATENT, &io::npy_bytes3(edited_latent.data())?)?;

        // metrics on the stored 8-bit result
        let stored = io::decode_image(&png)?;
        let mut report = desk_metrics(input, &stored, pixel_mask, cfg.change_eps)?;
        embedding_metrics(
            &mut report,
            input,
            &stored,
            &prompts.input_caption,
            &prompts.edited_caption,
            &ex.run.instruction,
            &backends.embeddings,
        );
        ex.run.metrics = Some(report);
        Ok(())
    }
}

/// Writes `scene` rendered as PNG plus its sidecar under `dir/<stem>.png`.
pub fn write_scene_image(scene: &Scene, dir: &Path, stem: &str) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}.png"));
    io::save_image(&scene.render(), &path)?;
    scene.save(&sidecar_path(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::BoundingBox;

    fn square_scene() -> Scene {
        Scene::new(64, 64, [0.5, 0.5, 0.5]).with_rect("dog", BoundingBox::new(16, 24, 24, 16), [230.0 / 255.0, 25.0 / 255.0, 25.0 / 255.0])
    }

    fn pipeline(dir: &Path) -> Pipeline {
        let config = PipelineConfig {
            runs_dir: dir.join("runs"),
            ..Default::default()
        };
        Pipeline::new(config, BackendRegistry::default()).unwrap()
    }

    #[test]
    fn mock_run_masks_the_square_and_keeps_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_scene_image(&square_scene(), dir.path(), "square").unwrap();
        let p = pipeline(dir.path());
        let mut req = EditRequest::from_path(&img, "Change the dog to a cat");
        req.overrides.pixel_paste_back = Some(true);
        let run = p.run_edit(&req).unwrap();
        assert_eq!(run.status, RunStatus::Done, "{:?}", run.error);
        assert_eq!(run.prompt_source, Some(PromptSource::Chat));
        let mask = mask_from_png(&p.store().read_artifact(&run.id, MASK).unwrap()).unwrap();
        assert_eq!(mask, BinaryMask::from_fn(64, 64, |i, j| BoundingBox::new(16, 24, 24, 16).contains(i, j)));
        let m = run.metrics.unwrap();
        assert_eq!(m.out_of_mask_l2, 0.0);
        assert!(m.in_mask_change_ratio > 0.0);
        for name in [MANIFEST_NAME, INPUT, CONFIG, TRANSCRIPT, SOFT_MASK, MASK, MASK_OVERLAY, EDITED, EDITED_LATENT] {
            assert!(p.artifact_path(&run.id, name).unwrap().exists(), "{name}");
        }
    }

    const MANIFEST_NAME: &str = store::MANIFEST;

    #[test]
    fn missing_object_fails_in_masking_with_the_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_scene_image(&square_scene(), dir.path(), "square").unwrap();
        let p = pipeline(dir.path());
        let run = p.run_edit(&EditRequest::from_path(&img, "Change the horse to a zebra")).unwrap();
        assert_eq!(run.status, RunStatus::Failed);
        let err = run.error.unwrap();
        assert_eq!(err.stage, "masking");
        assert!(err.message.contains("Horse") && err.user_facing, "{}", err.message);
    }

    #[test]
    fn same_request_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_scene_image(&square_scene(), dir.path(), "square").unwrap();
        let p = pipeline(dir.path());
        let req = EditRequest::from_path(&img, "Change the dog to a cat");
        let a = p.run_edit(&req).unwrap();
        let b = p.run_edit(&req).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(a.artifacts[EDITED_LATENT].sha256, b.artifacts[EDITED_LATENT].sha256);
        assert_eq!(a.artifacts[EDITED].sha256, b.artifacts[EDITED].sha256);
    }

    #[test]
    fn reruns_reuse_what_they_can() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_scene_image(&square_scene(), dir.path(), "square").unwrap();
        let p = pipeline(dir.path());
        let mut req = EditRequest::from_path(&img, "Change the dog to a cat");
        req.overrides.mask_source = Some(MaskSource::Diffedit);
        let parent = p.run_edit(&req).unwrap();
        assert_eq!(parent.status, RunStatus::Done, "{:?}", parent.error);

        let r_child = p
            .rerun_with_overrides(&parent.id, &Overrides { encoding_ratio: Some(0.8), ..Default::default() })
            .unwrap();
        assert_eq!(r_child.reuse, ReusePlan::BinaryMask);
        assert_eq!(r_child.parent_id.as_deref(), Some(parent.id.as_str()));
        assert_eq!(r_child.artifacts[MASK].sha256, parent.artifacts[MASK].sha256);
        assert_ne!(r_child.artifacts[EDITED_LATENT].sha256, parent.artifacts[EDITED_LATENT].sha256);

        let lo = p.rerun_with_overrides(&parent.id, &Overrides { theta: Some(0.3), ..Default::default() }).unwrap();
        let hi = p.rerun_with_overrides(&parent.id, &Overrides { theta: Some(0.8), ..Default::default() }).unwrap();
        for c in [&lo, &hi] {
            assert_eq!(c.reuse, ReusePlan::SoftMask);
            assert_eq!(c.artifacts[SOFT_MASK].sha256, parent.artifacts[SOFT_MASK].sha256);
        }
        let lo_m = mask_from_png(&p.store().read_artifact(&lo.id, MASK).unwrap()).unwrap();
        let hi_m = mask_from_png(&p.store().read_artifact(&hi.id, MASK).unwrap()).unwrap();
        assert!(hi_m.is_subset_of(&lo_m));

        let switched = p
            .rerun_with_overrides(&parent.id, &Overrides { mask_source: Some(MaskSource::Segmenter), ..Default::default() })
            .unwrap();
        assert_eq!(switched.reuse, ReusePlan::Prompts);
        assert_eq!(switched.mask_source, Some(MaskSource::Segmenter));

        assert!(matches!(p.rerun_with_overrides("missing", &Overrides::default()), Err(Error::UnknownRun(_))));
        assert!(p.rerun_with_overrides(&parent.id, &Overrides { encoding_ratio: Some(1.2), ..Default::default() }).is_err());
    }

    #[test]
    fn mask_only_runs_stop_after_masking() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_scene_image(&square_scene(), dir.path(), "square").unwrap();
        let p = pipeline(dir.path());
        let mut req = EditRequest::from_path(&img, "Change the dog to a cat");
        req.mask_only = true;
        let run = p.run_edit(&req).unwrap();
        assert_eq!(run.status, RunStatus::Masked);
        assert!(run.has_artifact(MASK_OVERLAY) && run.has_artifact(SOFT_MASK_PNG));
        assert!(!run.has_artifact(EDITED));
    }

    #[test]
    fn debug_steps_are_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_scene_image(&square_scene(), dir.path(), "square").unwrap();
        let p = pipeline(dir.path());
        let mut req = EditRequest::from_path(&img, "Change the dog to a cat");
        req.overrides.ddim_steps = Some(10);
        req.overrides.encoding_ratio = Some(0.3);
        let mut run = p.create_run(&req).unwrap();
        run.config.edit.debug_steps = true;
        p.store().update(&run).unwrap();
        let run = p.execute(&run.id).unwrap();
        assert_eq!(run.status, RunStatus::Done);
        assert_eq!(run.artifacts.keys().filter(|k| k.starts_with("debug/")).count(), 6);
    }

    #[test]
    fn bad_requests_are_rejected_before_a_run_exists() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path());
        let req = EditRequest {
            image: ImageRef::Bytes(b"junk".to_vec()),
            instruction: "Change the dog to a cat".into(),
            overrides: Overrides::default(),
            scene: None,
            mask_only: false,
        };
        assert!(matches!(p.create_run(&req), Err(Error::Image(_))));
        let req = EditRequest { instruction: " ".into(), ..req };
        assert!(p.create_run(&req).is_err());
        assert!(p.store().list().unwrap().is_empty());
    }
}
