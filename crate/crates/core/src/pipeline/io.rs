//! File helpers: atomic writes, `.npy` arrays and 8-bit PNG images.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use image::{ImageFormat, RgbImage};
use ndarray::{Array2, Array3};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use sha2::{Digest, Sha256};

use crate::{Error, Image, Result};

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let seq = SEQ.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{name}.{}.{seq}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn npy_bytes3(a: &Array3<f64>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    a.write_npy(&mut buf).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(buf)
}

pub fn npy_bytes2(a: &Array2<f64>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    a.write_npy(&mut buf).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(buf)
}

pub fn write_npy(path: &Path, a: &Array3<f64>) -> Result<()> {
    write_atomic(path, &npy_bytes3(a)?)
}

pub fn write_npy2(path: &Path, a: &Array2<f64>) -> Result<()> {
    write_atomic(path, &npy_bytes2(a)?)
}

pub fn read_npy3(path: &Path) -> Result<Array3<f64>> {
    let bytes = fs::read(path)?;
    Array3::<f64>::read_npy(Cursor::new(bytes))
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

pub fn read_npy2(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    Array2::<f64>::read_npy(Cursor::new(bytes))
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Decodes any supported raster format to RGB in `[0, 1]` (8-bit 255 -> 1.0).
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        f64::from(img.get_pixel(j as u32, i as u32)[c]) / 255.0
    }))
}

pub fn load_image(path: &Path) -> Result<Image> {
    decode_image(&fs::read(path)?)
}

/// 8-bit PNG encoding; values are clamped and rounded to the nearest level.
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::shape(&[3, h, w], image.shape()));
    }
    let rgb = RgbImage::from_fn(w as u32, h as u32, |j, i| {
        image::Rgb(std::array::from_fn(|k| {
            (image[[k, i as usize, j as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    let mut buf = Cursor::new(Vec::new());
    rgb.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

/// Grayscale rendering of a `[0, 1]` map as RGB.
pub fn gray_to_image(values: &Array2<f64>) -> Image {
    let (h, w) = values.dim();
    Array3::from_shape_fn((3, h, w), |(_, i, j)| values[[i, j]])
}
