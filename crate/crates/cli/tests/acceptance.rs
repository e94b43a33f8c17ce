//! Acceptance gate. Runs without the test harness so that each criterion's
//! PASS/FAIL line is always printed; exits nonzero if any criterion fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use maskedit_core::backends::BackendRegistry;
use maskedit_core::editor::{mask_guided_edit, EditConfig};
use maskedit_core::estimators::{NoiseEstimator, RegionToyEstimator, ToyLinearEstimator};
use maskedit_core::language::{
    build_task_prompt, fallback_parse, instruction_from_prompt, parse_llm_response, Instruction, ParsedPrompts,
    PromptTemplate, SceneDescription,
};
use maskedit_core::mask::{binarize_mask, estimate_soft_mask, BinaryMask, MaskEstimateConfig, MaskSource, SoftMask};
use maskedit_core::pipeline::io::sha256_hex;
use maskedit_core::pipeline::{write_scene_image, Pipeline, PipelineConfig};
use maskedit_core::scheduler::{
    ddim_denoise_step, ddim_invert_step, denoise_to_zero, predicted_x0, LatentState, NoiseSchedule,
};
use maskedit_core::segmenter::{
    compute_segmentation_mask, ground, segment_box, BoundingBox, BoxSegmenter, MockDetector, SelectionPolicy,
};
use maskedit_core::synthetic::{random_scene, Scene};
use maskedit_core::{Error, Execution, Latent};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_latent(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Latent {
    Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

fn max_abs(a: &Latent, b: &Latent) -> f64 {
    (a - b).mapv(f64::abs).fold(0.0, |m: f64, v| m.max(*v))
}

fn ddim_roundtrip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for total in [8usize, 64] {
        let schedules = [
            NoiseSchedule::stable_diffusion(total).unwrap(),
            NoiseSchedule::geometric(total, 0.9).unwrap(),
        ];
        for s in &schedules {
            for k in 1..=total {
                let x0 = normal_latent(&mut rng, (4, 8, 8));
                let bias = normal_latent(&mut rng, (4, 8, 8));
                let est = ToyLinearEstimator::new(0.0).with_bias_array("c", bias);
                let mut x = LatentState::new(x0.clone(), 0, s).unwrap();
                for _ in 0..k {
                    x = ddim_invert_step(&x, &est, "c", s).unwrap();
                }
                for _ in 0..k {
                    x = ddim_denoise_step(&x, &est, "c", s).unwrap();
                }
                worst = worst.max(max_abs(x.data(), &x0));
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-9, || format!("max error {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("{cases} (T, k) cases, max error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()))
}

fn f_theta_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a: f64 = rng.random_range(1e-4..1.0 - 1e-9);
        let s = NoiseSchedule::new(vec![1.0, a]).unwrap();
        let x = normal_latent(&mut rng, (2, 3, 3));
        let eps = normal_latent(&mut rng, (2, 3, 3));
        let state = LatentState::new(x.clone(), 1, &s).unwrap();
        let f = predicted_x0(&state, &eps, &s).unwrap();
        let by_hand = (&x - &eps * (1.0 - a).sqrt()) / a.sqrt();
        let rebuilt = &f * a.sqrt() + &eps * (1.0 - a).sqrt();
        worst = worst.max(max_abs(&f, &by_hand)).max(max_abs(&rebuilt, &x));
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 triples, max deviation {worst:.2e}"))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let p: f64 = rng.random_range(0.0..1.0);
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
}

fn out_of_mask_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0usize;
    for case in 0..100 {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(2..=8), rng.random_range(2..=8));
        let s = if case % 2 == 0 {
            NoiseSchedule::stable_diffusion(20).unwrap()
        } else {
            NoiseSchedule::geometric(20, 0.85).unwrap()
        };
        let base = ToyLinearEstimator::new(rng.random_range(0.0..0.5))
            .with_bias_array("in", normal_latent(&mut rng, (c, h, w)))
            .with_bias_array("out", normal_latent(&mut rng, (c, h, w)));
        let mask = random_mask(&mut rng, h, w);
        let est: Box<dyn NoiseEstimator> = if case % 3 == 0 {
            Box::new(RegionToyEstimator::new(Arc::new(base), "in", "out", random_mask(&mut rng, h, w), 0.7))
        } else {
            Box::new(base)
        };
        let x0 = LatentState::new(normal_latent(&mut rng, (c, h, w)), 0, &s).unwrap();
        let cfg = EditConfig {
            encoding_ratio: rng.random_range(0.01..=1.0),
            ddim_steps: 20,
            ..Default::default()
        };
        let out = mask_guided_edit(&x0, &mask, "in", "out", &cfg, est.as_ref(), &s).unwrap();
        for ((ch, i, j), v) in out.data().indexed_iter() {
            if !mask.get(i, j) {
                let want = x0.data()[[ch, i, j]];
                ensure(v.to_bits() == want.to_bits(), || format!("case {case} at {:?}: {v} vs {want}", (ch, i, j)))?;
                checked += 1;
            }
        }
    }
    Ok(format!("100 cases, {checked} out-of-mask values bitwise equal"))
}

fn full_mask_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = NoiseSchedule::stable_diffusion(30).unwrap();
    let est = ToyLinearEstimator::new(0.2)
        .with_bias_array("in", normal_latent(&mut rng, (4, 8, 8)))
        .with_bias_array("out", normal_latent(&mut rng, (4, 8, 8)));
    let ones = BinaryMask::filled(8, 8, true);
    for r in [0.05, 0.3, 0.5, 0.77, 1.0] {
        let x0 = LatentState::new(normal_latent(&mut rng, (4, 8, 8)), 0, &s).unwrap();
        let cfg = EditConfig {
            encoding_ratio: r,
            ddim_steps: 30,
            ..Default::default()
        };
        let edited = mask_guided_edit(&x0, &ones, "in", "out", &cfg, &est, &s).unwrap();
        let r_idx = ((r * 30.0_f64).round() as usize).max(1);
        let mut x = x0.clone();
        for _ in 0..r_idx {
            x = ddim_invert_step(&x, &est, "in", &s).unwrap();
        }
        let reference = denoise_to_zero(&x, &est, "out", &s).unwrap();
        let same = edited.data().iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("r={r}: max diff {:e}", max_abs(edited.data(), reference.data())))?;
    }
    Ok("5 encoding ratios, bitwise equal to plain generation from x_r".into())
}

fn diffedit_recovery() -> Outcome {
    let s = NoiseSchedule::stable_diffusion(50).unwrap();
    let support = BinaryMask::from_fn(8, 8, |_, j| j < 4);
    let base: Arc<dyn NoiseEstimator> = Arc::new(ToyLinearEstimator::new(0.1).with_bias("in", 0.3));
    let est = RegionToyEstimator::new(base.clone(), "in", "out", support.clone(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = LatentState::new(normal_latent(&mut rng, (4, 8, 8)), 0, &s).unwrap();
    let cfg = MaskEstimateConfig {
        smoothing_radius: 0,
        ..Default::default()
    };
    let soft = estimate_soft_mask(&x0, "in", "out", &cfg, &est, &s, 11, Execution::default()).unwrap();
    for theta in [0.1, 0.5, 0.9] {
        let m = binarize_mask(&soft, theta).unwrap();
        ensure(m == support, || format!("theta {theta}: {} cells vs {}", m.count(), support.count()))?;
    }
    let same = estimate_soft_mask(&x0, "in", "in", &cfg, &est, &s, 11, Execution::default()).unwrap();
    ensure(same.values().iter().all(|v| *v == 0.0), || "identical captions gave a non-zero soft mask".into())?;
    for case in 0..100 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let vals = Array2::from_shape_simple_fn((h, w), || rng.random_range(0.0..=1.0));
        let soft = SoftMask::new(vals, MaskSource::Diffedit).unwrap();
        let a: f64 = rng.random_range(1e-6..1.0);
        let b: f64 = rng.random_range(1e-6..1.0);
        let (lo, hi) = (a.min(b), a.max(b));
        let sub = binarize_mask(&soft, hi).unwrap().is_subset_of(&binarize_mask(&soft, lo).unwrap());
        ensure(sub, || format!("monotonicity case {case}: theta {hi} not within {lo}"))?;
    }
    Ok("support recovered for theta 0.1/0.5/0.9, identical captions -> 0, 100 monotone cases".into())
}

fn segmenter_geometry() -> Outcome {
    let policy = SelectionPolicy::default();
    let mut boxes = 0;
    for seed in 0..20 {
        let scene = random_scene(seed, 64, 64, 4);
        let image = scene.render();
        let det = MockDetector::new(scene.clone());
        let mut union = BinaryMask::filled(64, 64, false);
        let mut area_sum = 0;
        for r in &scene.rects {
            let found = ground(&det, &image, &r.label, &policy).unwrap();
            ensure(found.len() == 1 && found[0].bbox == r.bbox, || {
                format!("scene {seed} `{}`: {found:?} vs {:?}", r.label, r.bbox)
            })?;
            let m = segment_box(&BoxSegmenter, &image, &found[0].bbox).unwrap();
            let exact = m.as_array().indexed_iter().all(|((i, j), v)| *v == r.bbox.contains(i, j));
            ensure(exact && m.count() == r.bbox.area(), || format!("scene {seed} `{}` mask mismatch", r.label))?;
            let via_prompt = compute_segmentation_mask(&det, &BoxSegmenter, &image, &r.label, &policy, Execution::default()).unwrap();
            ensure(via_prompt == m, || format!("scene {seed} `{}` prompt mask differs", r.label))?;
            union = union.union(&m).unwrap();
            area_sum += r.bbox.area();
            boxes += 1;
        }
        ensure(union.count() == area_sum, || format!("scene {seed}: union {} vs {area_sum}", union.count()))?;
        match compute_segmentation_mask(&det, &BoxSegmenter, &image, "unicorn", &policy, Execution::default()) {
            Err(Error::ObjectNotFound(q)) if q == "unicorn" => {}
            other => return Err(format!("scene {seed}: absent phrase gave {other:?}")),
        }
    }
    // one prompt matching two disjoint boxes
    let twin = Scene::new(32, 32, [0.5; 3])
        .with_rect("dog", BoundingBox::new(2, 2, 5, 7), [1.0, 0.0, 0.0])
        .with_rect("dog", BoundingBox::new(20, 18, 9, 4), [0.0, 0.0, 1.0]);
    let m = compute_segmentation_mask(&MockDetector::new(twin.clone()), &BoxSegmenter, &twin.render(), "dogs", &policy, Execution::default())
        .unwrap();
    ensure(m.count() == 35 + 36, || format!("twin union area {}", m.count()))?;
    Ok(format!("20 scenes, {boxes} boxes exact, unions additive, absent phrase raises"))
}

#[derive(serde::Deserialize)]
struct GoldenCase {
    instruction: String,
    #[serde(default)]
    description: Option<String>,
    chat_answer: String,
    expected: [String; 3],
    fallback: bool,
}

fn language_golden() -> Outcome {
    let cases: Vec<GoldenCase> =
        serde_json::from_str(include_str!("../../core/tests/data/language_golden.json")).map_err(|e| e.to_string())?;
    ensure(cases.len() == 20, || format!("{} golden cases", cases.len()))?;
    let answers: HashMap<&str, &str> = cases.iter().map(|c| (c.instruction.as_str(), c.chat_answer.as_str())).collect();
    let template = PromptTemplate::default();
    for c in &cases {
        let instr = Instruction::new(&c.instruction).unwrap();
        let desc = c.description.as_ref().map(|d| SceneDescription {
            kind: "A photo".into(),
            text: d.clone(),
        });
        let prompt = build_task_prompt(&instr, desc.as_ref(), &template);
        let asked = instruction_from_prompt(&prompt).ok_or("no instruction line in prompt")?;
        let parsed = parse_llm_response(answers[asked]).map_err(|e| format!("{}: {e}", c.instruction))?;
        let expected = ParsedPrompts::new(&c.expected[0], &c.expected[1], &c.expected[2]).unwrap();
        ensure(parsed == expected, || format!("{}: {parsed:?}", c.instruction))?;
        let fb = fallback_parse(&instr).ok();
        ensure(fb.as_ref().map(|p| p == &expected).unwrap_or(false) == c.fallback, || {
            format!("fallback for {}: {fb:?}", c.instruction)
        })?;
    }
    let canonical = build_task_prompt(&Instruction::new("Change the dog to a cat").unwrap(), None, &template);
    let exact = "you need to give the segmentation model only the keyword ``Dog''. You also need to give the image \
editing model two text prompts: ``Photo of a dog'', and ``Photo of a cat''. Your answer should be in the form of: \
Segmentation prompt: Dog. Editing prompt 1: ``Photo of a dog''. Editing prompt2: ``Photo of a cat''.";
    ensure(canonical.contains(exact), || "template example is not byte-exact".into())?;
    Ok("20 golden instructions round-trip; template example byte-exact".into())
}

fn run_selftest(keep: &Path) -> Result<(Duration, String), String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_maskedit"))
        .arg("selftest")
        .arg("--keep")
        .arg(keep)
        .env_remove("MASKEDIT_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    ensure(out.status.success(), || {
        format!("exit {:?}: {stdout}{}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    Ok((elapsed, stdout))
}

fn only_run(dir: &Path) -> std::path::PathBuf {
    let mut runs: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs.pop().unwrap()
}

fn cli_selftest() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (ta, out) = run_selftest(&a)?;
    let (tb, _) = run_selftest(&b)?;
    ensure(out.contains("selftest out_of_mask_l2: ok 0"), || out.clone())?;
    ensure(!out.contains("FAIL"), || out.clone())?;
    // the same edit across the two processes, too
    for name in ["edited.png", "edited_latent.npy", "mask.png", "soft_mask.npy"] {
        let fa = std::fs::read(only_run(&a.join("runs0")).join(name)).map_err(|e| e.to_string())?;
        let fb = std::fs::read(only_run(&b.join("runs1")).join(name)).map_err(|e| e.to_string())?;
        ensure(fa == fb, || format!("{name} differs across executions"))?;
    }
    let worst = ta.max(tb);
    ensure(worst < Duration::from_secs(30), || format!("took {worst:?}"))?;
    Ok(format!("byte-identical across 4 runs in 2 processes, out_of_mask_l2 = 0, {:.2}s", worst.as_secs_f64()))
}

mod service {
    use super::*;
    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use axum::Router;
    use http_body_util::BodyExt;
    use serde_json::Value;
    use tower::ServiceExt;

    const BOUNDARY: &str = "acceptance-boundary";

    async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn poll(app: &Router, id: &str, validator: &jsonschema::Validator) -> Result<Value, String> {
        let start = Instant::now();
        loop {
            let (s, v) = call(app, Request::get(format!("/edits/{id}")).body(Body::empty()).unwrap()).await;
            ensure(s == StatusCode::OK, || format!("GET {id}: {s}"))?;
            let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
            ensure(errors.is_empty(), || format!("schema: {errors:?}"))?;
            if matches!(v["status"].as_str(), Some("done" | "failed" | "masked")) {
                return Ok(v);
            }
            ensure(start.elapsed() < Duration::from_secs(60), || format!("{id} stuck at {}", v["status"]))?;
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    async fn rerun(app: &Router, id: &str, body: &str, validator: &jsonschema::Validator) -> Result<Value, String> {
        let req = Request::post(format!("/edits/{id}/rerun"))
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let (s, v) = call(app, req).await;
        ensure(s == StatusCode::ACCEPTED, || format!("rerun {body}: {s} {v}"))?;
        let child = poll(app, v["id"].as_str().unwrap(), validator).await?;
        ensure(child["status"] == "done" && child["parent_id"] == id, || format!("child {child}"))?;
        Ok(child)
    }

    async fn lifecycle(dir: &Path) -> Outcome {
        let schema: Value = serde_json::from_str(maskedit_service::API_RUN_SCHEMA).unwrap();
        let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
        let config = PipelineConfig {
            runs_dir: dir.join("runs"),
            ..Default::default()
        };
        let pipeline = Arc::new(Pipeline::new(config, BackendRegistry::with_builtin()).unwrap());
        let app = maskedit_service::router(pipeline.clone(), maskedit_service::ServiceOptions::from_pipeline(&pipeline));

        let scene = maskedit_cli::selftest_scene();
        let image = std::fs::read(write_scene_image(&scene, dir, "square").unwrap()).unwrap();
        let mut body = Vec::new();
        let text = |body: &mut Vec<u8>, name: &str, value: &str| {
            body.extend_from_slice(
                format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes(),
            );
        };
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"square.png\"\r\n\r\n")
                .as_bytes(),
        );
        body.extend_from_slice(&image);
        body.extend_from_slice(b"\r\n");
        text(&mut body, "instruction", maskedit_cli::SELFTEST_INSTRUCTION);
        text(&mut body, "overrides", r#"{"mask_source": "diffedit", "theta": 0.4}"#);
        text(&mut body, "scene", &scene.to_json().unwrap());
        body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
        let req = Request::post("/edits")
            .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
            .body(Body::from(body))
            .unwrap();
        let (s, created) = call(&app, req).await;
        ensure(s == StatusCode::ACCEPTED && created["status"] == "parsing", || format!("submit: {s} {created}"))?;
        let id = created["id"].as_str().unwrap().to_string();
        let parent = poll(&app, &id, &validator).await?;
        ensure(parent["status"] == "done", || format!("parent {parent}"))?;

        let soft_hash = |run: &Value| {
            let path = dir.join("runs").join(run["id"].as_str().unwrap()).join("soft_mask.npy");
            sha256_hex(&std::fs::read(path).unwrap())
        };
        let theta_child = rerun(&app, &id, r#"{"theta": 0.7}"#, &validator).await?;
        ensure(theta_child["reuse"] == "soft_mask", || format!("theta rerun reuse {}", theta_child["reuse"]))?;
        ensure(soft_hash(&parent) == soft_hash(&theta_child), || "soft mask hash changed on theta rerun".into())?;
        ensure(parent["artifacts"]["soft_mask"]["sha256"] == theta_child["artifacts"]["soft_mask"]["sha256"], || {
            "soft mask image hash changed".into()
        })?;

        let r_child = rerun(&app, &id, r#"{"encoding_ratio": 0.8}"#, &validator).await?;
        ensure(r_child["reuse"] == "binary_mask", || format!("r rerun reuse {}", r_child["reuse"]))?;
        ensure(parent["artifacts"]["mask"]["sha256"] == r_child["artifacts"]["mask"]["sha256"], || {
            "binary mask hash changed on r rerun".into()
        })?;
        Ok("submit/poll/rerun schema-valid; theta rerun keeps soft mask hash; r rerun keeps binary mask hash".into())
    }

    pub fn contract() -> Outcome {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| e.to_string())?;
        rt.block_on(lifecycle(tmp.path()))
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("ddim roundtrip", ddim_roundtrip),
        ("f_theta identity", f_theta_identity),
        ("out-of-mask exactness", out_of_mask_exactness),
        ("full-mask equivalence", full_mask_equivalence),
        ("diffedit support recovery", diffedit_recovery),
        ("segmenter geometry", segmenter_geometry),
        ("language golden suite", language_golden),
        ("cli selftest", cli_selftest),
        ("service contract", service::contract),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
