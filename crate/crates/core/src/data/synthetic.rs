use super::manifest::{write_csv, Manifest, ScreenSample, MAX_RATING, MIN_RATING};
use crate::error::{Error, Result};
use image::{ImageFormat, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Number of levels per planted feature.
pub const LEVELS: u8 = 5;

const SENTIMENT: [[&str; 2]; 5] = [
    ["terrible", "broken"],
    ["poor", "clunky"],
    ["okay", "plain"],
    ["good", "clean"],
    ["excellent", "delightful"],
];
const NOUNS: [&str; 8] = ["login", "checkout", "settings", "profile", "feed", "map", "chat", "search"];
const CATEGORIES: [&str; 5] = ["shopping", "communication", "social", "tools", "travel"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub seed: u64,
    /// Half-width of the uniform noise added to the true rating.
    pub noise: f64,
    pub image_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 32,
            seed: 0,
            noise: 0.0,
            image_size: 64,
        }
    }
}

/// Planted features, each in `0..LEVELS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticFeatures {
    pub brightness: u8,
    pub rectangles: u8,
    pub sentiment: u8,
}

/// Ground truth: the rating is linear in the three feature levels and spans [1, 5].
pub fn true_rating(f: &SyntheticFeatures) -> f64 {
    1.0 + (f.brightness + f.rectangles + f.sentiment) as f64 / 3.0
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample: ScreenSample,
    pub features: SyntheticFeatures,
    pub true_rating: f64,
}

fn split_total(total: u8, rng: &mut ChaCha8Rng) -> SyntheticFeatures {
    let max = LEVELS - 1;
    let lo = total.saturating_sub(2 * max);
    let hi = total.min(max);
    let b = rng.random_range(lo..=hi);
    let rest = total - b;
    let lo = rest.saturating_sub(max);
    let hi = rest.min(max);
    let r = rng.random_range(lo..=hi);
    SyntheticFeatures {
        brightness: b,
        rectangles: r,
        sentiment: rest - r,
    }
}

fn render(f: &SyntheticFeatures, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let size = size as u32;
    let bg = 40 + 40 * f.brightness;
    let mut img = RgbImage::from_pixel(size, size, Rgb([bg, bg, bg]));
    let half = size / 2;
    let side = (half * 3 / 5).max(1);
    let mut quads = [0u32, 1, 2, 3];
    quads.shuffle(rng);
    for &q in &quads[..f.rectangles as usize] {
        let slack = half - side;
        let x0 = (q % 2) * half + rng.random_range(0..=slack);
        let y0 = (q / 2) * half + rng.random_range(0..=slack);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                img.put_pixel(x, y, Rgb([220, 40, 40]));
            }
        }
    }
    img
}

/// Write `n` PNG screens under `out_dir/images` plus `out_dir/manifest.csv`.
/// Every one of the 13 possible ratings appears before any repeats (in a
/// seeded order), so small corpora still cover [1, 5].
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<(Manifest, Vec<SyntheticSample>)> {
    if cfg.n == 0 {
        return Err(Error::Config("synthetic corpus needs n >= 1".into()));
    }
    if cfg.image_size < 4 {
        return Err(Error::Config("synthetic image size must be at least 4".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config("noise must be finite and non-negative".into()));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let totals_per_cycle = 3 * (LEVELS - 1) + 1;
    let mut order: Vec<u8> = Vec::new();
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        if order.is_empty() {
            order = (0..totals_per_cycle).collect();
            order.shuffle(&mut rng);
        }
        let features = split_total(order.pop().expect("refilled"), &mut rng);
        let img = render(&features, cfg.image_size, &mut rng);
        let name = format!("images/screen_{i:05}.png");
        let path = out_dir.join(&name);
        img.save_with_format(&path, ImageFormat::Png)
            .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;

        let words = SENTIMENT[features.sentiment as usize];
        let adj = words[rng.random_range(0..words.len())];
        let noun = NOUNS[rng.random_range(0..NOUNS.len())];
        let category = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
        let truth = true_rating(&features);
        let jitter = if cfg.noise > 0.0 {
            rng.random_range(-cfg.noise..=cfg.noise)
        } else {
            0.0
        };
        let sample = ScreenSample {
            image_path: name,
            caption: format!("{adj} {noun} screen"),
            category: category.into(),
            avg_rating: (truth + jitter).clamp(MIN_RATING, MAX_RATING),
            num_ratings: rng.random_range(1..500),
        };
        out.push(SyntheticSample {
            sample,
            features,
            true_rating: truth,
        });
    }
    let samples: Vec<ScreenSample> = out.iter().map(|s| s.sample.clone()).collect();
    let manifest_path = out_dir.join("manifest.csv");
    write_csv(&samples, &manifest_path)?;
    let mut m = Manifest::new(samples, out_dir.to_path_buf(), cfg.seed);
    m.source = Some(manifest_path);
    Ok((m, out))
}
