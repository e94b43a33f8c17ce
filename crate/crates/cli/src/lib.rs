//! `maskedit` command line. Every subcommand works offline with the `mock`
//! profile. Exit status: 0 on success, 1 when a run fails, 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskedit_core::backends::BackendRegistry;
use maskedit_core::mask::MaskSource;
use maskedit_core::pipeline::io::{load_image, read_npy3};
use maskedit_core::pipeline::{
    self as pl, write_scene_image, EditRequest, EditRun, Overrides, Pipeline, PipelineConfig, RunStatus, CONFIG_ENV,
};
use maskedit_core::segmenter::BoundingBox;
use maskedit_core::synthetic::Scene;
use maskedit_core::Error;
use maskedit_service::ServiceOptions;

#[derive(Debug, Parser)]
#[command(name = "maskedit", version, about = "Instruction-driven, mask-guided image editing")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse, mask and edit one image.
    Edit(EditArgs),
    /// Stop after masking and emit the soft mask, binary mask and overlay.
    Mask(EditArgs),
    /// Re-run an existing run with changed settings.
    Rerun(RerunArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// End-to-end check on a synthetic scene with the mock profile.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Segmenter,
    Diffedit,
}

impl From<SourceArg> for MaskSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Segmenter => MaskSource::Segmenter,
            SourceArg::Diffedit => MaskSource::Diffedit,
        }
    }
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long)]
    pub encoding_ratio: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, value_enum)]
    pub mask_source: Option<SourceArg>,
    #[arg(long)]
    pub backend_profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    /// Copy input pixels back outside the mask after decoding.
    #[arg(long)]
    pub paste_back: bool,
    /// Runs directory (defaults to the configured one).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long = "run")]
    pub run_id: String,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub encoding_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub mask_source: Option<SourceArg>,
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Built UI bundle to serve under /ui.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Keep the run directories here instead of a temporary directory.
    #[arg(long)]
    pub keep: Option<PathBuf>,
}

/// Failure with its exit status.
#[derive(Debug)]
struct Exit {
    code: i32,
    message: String,
}

impl Exit {
    fn usage(msg: impl std::fmt::Display) -> Self {
        Self { code: 2, message: msg.to_string() }
    }

    fn failure(msg: impl std::fmt::Display) -> Self {
        Self { code: 1, message: msg.to_string() }
    }

    /// Errors raised before any run exists.
    fn from_setup(e: Error) -> Self {
        if e.is_user_facing() || matches!(e, Error::InvalidConfig(_) | Error::UnknownRun(_)) {
            Self::usage(e)
        } else {
            Self::failure(e)
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn pipeline(config: Option<&Path>, out: Option<&Path>) -> Result<Pipeline, Exit> {
    let mut cfg = PipelineConfig::resolve(config).map_err(Exit::from_setup)?;
    if let Some(o) = out {
        cfg.runs_dir = o.to_path_buf();
    }
    Pipeline::new(cfg, BackendRegistry::with_builtin()).map_err(Exit::from_setup)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Exit> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Edit(a) => edit(config, a, false, out),
        Command::Mask(a) => edit(config, a, true, out),
        Command::Rerun(a) => {
            let p = pipeline(config, a.out.as_deref())?;
            let overrides = Overrides {
                theta: a.theta,
                encoding_ratio: a.encoding_ratio,
                mask_source: a.mask_source.map(Into::into),
                instruction: a.instruction,
                seed: a.seed,
                ..Default::default()
            };
            let run = p.rerun_with_overrides(&a.run_id, &overrides).map_err(Exit::from_setup)?;
            report(&p, &run, out)
        }
        Command::Serve(a) => serve(config, a),
        Command::Selftest(a) => {
            let report = match a.keep {
                Some(dir) => selftest(&dir, out),
                None => {
                    let tmp = tempfile::tempdir().map_err(Exit::failure)?;
                    selftest(tmp.path(), out)
                }
            };
            report.map_err(|msg| Exit::failure(format!("selftest failed: {msg}")))
        }
    }
}

fn edit(config: Option<&Path>, a: EditArgs, mask_only: bool, out: &mut dyn Write) -> Result<(), Exit> {
    let p = pipeline(config, a.out.as_deref())?;
    let mut req = EditRequest::from_path(&a.image, &a.instruction);
    req.mask_only = mask_only;
    req.overrides = Overrides {
        theta: a.theta,
        encoding_ratio: a.encoding_ratio,
        mask_source: a.mask_source.map(Into::into),
        seed: a.seed,
        ddim_steps: a.ddim_steps,
        pixel_paste_back: a.paste_back.then_some(true),
        profile: a.backend_profile,
        ..Default::default()
    };
    let run = p.run_edit(&req).map_err(Exit::from_setup)?;
    report(&p, &run, out)
}

fn report(p: &Pipeline, run: &EditRun, out: &mut dyn Write) -> Result<(), Exit> {
    let dir = p.artifact_path(&run.id, pl::store::MANIFEST).map_err(Exit::failure)?;
    let _ = writeln!(out, "run {} {}", run.id, run.status);
    let _ = writeln!(out, "  dir: {}", dir.parent().unwrap_or(&dir).display());
    if let Some(pr) = &run.prompts {
        let _ = writeln!(
            out,
            "  prompts: q={:?} input={:?} edited={:?}",
            pr.segmentation_prompt, pr.input_caption, pr.edited_caption
        );
    }
    for name in run.artifacts.keys() {
        if let Ok(path) = p.artifact_path(&run.id, name) {
            let _ = writeln!(out, "  {name}: {}", path.display());
        }
    }
    if let Some(m) = &run.metrics {
        let _ = writeln!(
            out,
            "  out_of_mask_l2: {:.6}  in_mask_change_ratio: {:.4}",
            m.out_of_mask_l2, m.in_mask_change_ratio
        );
    }
    match &run.error {
        Some(e) if run.status == RunStatus::Failed => {
            Err(Exit::failure(format!("run {} failed at stage {}: {}", run.id, e.stage, e.message)))
        }
        _ => Ok(()),
    }
}

fn serve(config: Option<&Path>, a: ServeArgs) -> Result<(), Exit> {
    let p = pipeline(config, a.out.as_deref())?;
    let mut opts = ServiceOptions::from_pipeline(&p);
    opts.ui_dir = a.ui;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Exit::failure)?;
    let addr = SocketAddr::new(a.host, a.port);
    rt.block_on(maskedit_service::serve(Arc::new(p), opts, addr))
        .map_err(|e| Exit::failure(format!("serve on {addr}: {e}")))
}

pub const SELFTEST_INSTRUCTION: &str = "Change the red square to a blue square";

/// Square the selftest expects the mask to recover, in pixels.
pub const SELFTEST_BOX: BoundingBox = BoundingBox {
    top: 16,
    left: 24,
    height: 24,
    width: 16,
};

pub fn selftest_scene() -> Scene {
    Scene::new(64, 64, [0.5, 0.5, 0.5]).with_rect("red square", SELFTEST_BOX, [1.0, 0.0, 0.0])
}

/// Two seed-fixed mock runs on the same synthetic image; checks determinism,
/// out-of-mask exactness with paste-back and mask geometry.
pub fn selftest(dir: &Path, out: &mut dyn Write) -> Result<(), String> {
    let start = Instant::now();
    let image = write_scene_image(&selftest_scene(), dir, "square").map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let cfg = PipelineConfig {
            runs_dir: dir.join(format!("runs{k}")),
            ..Default::default()
        };
        let p = Pipeline::new(cfg, BackendRegistry::with_builtin()).map_err(|e| e.to_string())?;
        let mut req = EditRequest::from_path(&image, SELFTEST_INSTRUCTION);
        req.overrides = Overrides {
            seed: Some(7),
            pixel_paste_back: Some(true),
            profile: Some("mock".into()),
            ..Default::default()
        };
        let run = p.run_edit(&req).map_err(|e| e.to_string())?;
        if run.status != RunStatus::Done {
            return Err(format!("run {} ended {}: {:?}", run.id, run.status, run.error));
        }
        runs.push((p, run));
    }
    let mut check = |name: &str, ok: bool, detail: String| -> Result<(), String> {
        let _ = writeln!(out, "selftest {name}: {} {detail}", if ok { "ok" } else { "FAIL" });
        if ok {
            Ok(())
        } else {
            Err(format!("{name}: {detail}"))
        }
    };

    let (pa, a) = &runs[0];
    let (pb, b) = &runs[1];
    for name in [pl::EDITED, pl::EDITED_LATENT, pl::MASK, pl::SOFT_MASK] {
        let (ha, hb) = (&a.artifacts[name].sha256, &b.artifacts[name].sha256);
        check(&format!("identical {name}"), ha == hb, format!("{ha} vs {hb}"))?;
    }
    let latent = |p: &Pipeline, r: &EditRun| {
        p.artifact_path(&r.id, pl::EDITED_LATENT)
            .and_then(|path| read_npy3(&path))
            .map_err(|e| e.to_string())
    };
    let (la, lb) = (latent(pa, a)?, latent(pb, b)?);
    let bitwise = la.iter().zip(lb.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    check("bitwise latents", bitwise, format!("{} values", la.len()))?;

    let l2 = a.metrics.as_ref().map(|m| m.out_of_mask_l2).unwrap_or(f64::NAN);
    check("out_of_mask_l2", l2 == 0.0, format!("{l2}"))?;

    let mask = pa
        .artifact_path(&a.id, pl::MASK)
        .and_then(|path| load_image(&path))
        .map_err(|e| e.to_string())?;
    let bx = SELFTEST_BOX;
    let mismatches = mask
        .index_axis(ndarray::Axis(0), 0)
        .indexed_iter()
        .filter(|((i, j), v)| {
            let inside = (bx.top..bx.top + bx.height).contains(i) && (bx.left..bx.left + bx.width).contains(j);
            (**v > 0.5) != inside
        })
        .count();
    check("mask geometry", mismatches == 0, format!("{mismatches} pixels off"))?;

    let elapsed = start.elapsed();
    check("runtime", elapsed < Duration::from_secs(30), format!("{:.2}s", elapsed.as_secs_f64()))?;
    Ok(())
}
