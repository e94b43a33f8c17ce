//! Synthetic rectangle scenes and their sidecar geometry files.
//!
//! A scene is a background colour plus labeled axis-aligned rectangles drawn
//! in order (later rectangles paint over earlier ones). The sidecar is the
//! JSON form of [`Scene`], stored next to the rendered image as
//! `<image stem>.scene.json`.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::segmenter::BoundingBox;
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRect {
    pub label: String,
    /// Top row, left column, height, width in pixels.
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// RGB fill in `[0, 1]`.
    pub color: [f64; 3],
    /// Scales the detector's phrase-match score; lets tests rank instances.
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    pub rects: Vec<LabeledRect>,
}

impl Scene {
    pub fn new(height: usize, width: usize, background: [f64; 3]) -> Self {
        Self {
            height,
            width,
            background,
            rects: Vec::new(),
        }
    }

    pub fn with_rect(mut self, label: &str, bbox: BoundingBox, color: [f64; 3]) -> Self {
        self.rects.push(LabeledRect {
            label: label.to_string(),
            bbox,
            color,
            confidence: 1.0,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rects {
            r.bbox.check_within(self.height, self.width)?;
            if r.color.iter().chain(&self.background).any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::OutOfRange(format!("colour of `{}` outside [0, 1]", r.label)));
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(Error::OutOfRange(format!("confidence of `{}` outside [0, 1]", r.label)));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> Image {
        let mut img = Array3::zeros((3, self.height, self.width));
        for c in 0..3 {
            img.index_axis_mut(ndarray::Axis(0), c).fill(self.background[c]);
        }
        for r in &self.rects {
            let b = &r.bbox;
            for i in b.top..b.top + b.height {
                for j in b.left..b.left + b.width {
                    for c in 0..3 {
                        img[[c, i, j]] = r.color[c];
                    }
                }
            }
        }
        img
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::io::write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// `dir/square.png` -> `dir/square.scene.json`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    image.with_file_name(format!("{stem}.scene.json"))
}

/// 8-bit-representable colours so scenes survive PNG round trips exactly.
const PALETTE: [([u8; 3], &str); 8] = [
    ([230, 25, 25], "red"),
    ([25, 60, 230], "blue"),
    ([30, 200, 40], "green"),
    ([250, 220, 20], "yellow"),
    ([150, 40, 200], "purple"),
    ([250, 130, 10], "orange"),
    ([20, 200, 210], "cyan"),
    ([240, 60, 180], "pink"),
];

const OBJECTS: [&str; 8] = ["dog", "cat", "bus", "vase", "laptop", "horse", "chair", "clock"];

pub fn palette_color(idx: usize) -> ([f64; 3], &'static str) {
    let (rgb, name) = PALETTE[idx % PALETTE.len()];
    (rgb.map(|v| f64::from(v) / 255.0), name)
}

/// Random scene with 1..=`max_rects` non-overlapping rectangles, each with a
/// distinct colour and a distinct object label.
pub fn random_scene(seed: u64, height: usize, width: usize, max_rects: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::new(height, width, [0.5, 0.5, 0.5]);
    let n = rng.random_range(1..=max_rects.clamp(1, OBJECTS.len()));
    let color_offset = rng.random_range(0..PALETTE.len());
    let object_offset = rng.random_range(0..OBJECTS.len());
    let mut attempts = 0;
    while scene.rects.len() < n && attempts < 1000 {
        attempts += 1;
        let bh = rng.random_range(1..=height / 2);
        let bw = rng.random_range(1..=width / 2);
        let top = rng.random_range(0..=height - bh);
        let left = rng.random_range(0..=width - bw);
        let b = BoundingBox::new(top, left, bh, bw);
        if scene.rects.iter().any(|r| r.bbox.intersects(&b)) {
            continue;
        }
        let k = scene.rects.len();
        let (color, cname) = palette_color(color_offset + k);
        let label = format!("{cname} {}", OBJECTS[(object_offset + k) % OBJECTS.len()]);
        scene = scene.with_rect(&label, b, color);
    }
    scene
}
