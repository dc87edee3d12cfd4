use crate::error::{Error, Result};
use crate::tensor::Tensor;
use image::imageops::FilterType;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.5;

/// Decode, resize to `size`x`size` (bilinear, skipped when already that
/// size) and normalise into `[3, size, size]` with values in `[-1, 1]`.
pub fn preprocess_image(bytes: &[u8], size: usize) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let at = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + at] = (px[c] as f64 / 255.0 - NORM_MEAN) / NORM_STD;
        }
    }
    Tensor::new(vec![3, size, size], data)
}

pub fn preprocess_path(path: &Path, size: usize) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    preprocess_image(&bytes, size).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parallel over samples; results keep input order and failures stay per-sample.
pub fn preprocess_batch(paths: &[PathBuf], size: usize) -> Vec<Result<Tensor>> {
    paths.par_iter().map(|p| preprocess_path(p, size)).collect()
}
