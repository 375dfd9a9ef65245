//! Deterministic generator for two visually distinct toy domains.
//!
//! The `Synthetic` domain has a flat dark background with bright,
//! axis-aligned stroke-grid "words". The `Real` domain has a blotchy
//! textured background, dimmer strokes, per-instance rotation and a 3x3
//! box blur. Ground-truth masks are the rendered strokes before blur.

mod io;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numcore::Tensor;
use crate::raster::{BinaryMap, PixelBox};

pub use io::{
    load_manifest, load_sample, read_pgm, write_dataset, write_pgm, write_sample, DataError, Manifest, MANIFEST_FILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Synthetic,
    Real,
}

impl Domain {
    fn salt(self) -> u64 {
        match self {
            Domain::Synthetic => 0x5359_4e54,
            Domain::Real => 0x5245_414c,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Synthetic => "synthetic",
            Domain::Real => "real",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blur {
    None,
    Box3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub image_size: usize,
    pub background_level: f64,
    pub background_noise_std: f64,
    pub background_texture_amp: f64,
    /// Texture is a bilinear upsampling of a `cells x cells` random grid.
    pub texture_cells: usize,
    pub stroke_intensity_range: [f64; 2],
    pub instance_rotation_max_deg: f64,
    /// Probability that a word is turned a quarter turn before the small
    /// rotation, giving vertical text.
    #[serde(default)]
    pub vertical_fraction: f64,
    pub blur_kernel: Blur,
    pub instance_count_range: [usize; 2],
    pub min_instance_area: usize,
}

impl DomainConfig {
    pub fn synthetic() -> Self {
        Self {
            image_size: 64,
            background_level: 0.1,
            background_noise_std: 0.02,
            background_texture_amp: 0.0,
            texture_cells: 4,
            stroke_intensity_range: [0.85, 1.0],
            instance_rotation_max_deg: 0.0,
            vertical_fraction: 0.0,
            blur_kernel: Blur::None,
            instance_count_range: [1, 4],
            min_instance_area: 12,
        }
    }

    pub fn real() -> Self {
        Self {
            image_size: 64,
            background_level: 0.2,
            background_noise_std: 0.05,
            background_texture_amp: 0.15,
            texture_cells: 4,
            stroke_intensity_range: [0.45, 0.9],
            instance_rotation_max_deg: 15.0,
            vertical_fraction: 0.0,
            blur_kernel: Blur::Box3,
            instance_count_range: [1, 4],
            min_instance_area: 12,
        }
    }

    pub fn default_for(domain: Domain) -> Self {
        match domain {
            Domain::Synthetic => Self::synthetic(),
            Domain::Real => Self::real(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let [lo, hi] = self.stroke_intensity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(format!("stroke_intensity_range {:?} must be ordered within [0, 1]", self.stroke_intensity_range));
        }
        let [cmin, cmax] = self.instance_count_range;
        if cmin < 1 || cmin > cmax || cmax > 4 {
            return Err(format!("instance_count_range {:?} must satisfy 1 <= lo <= hi <= 4", self.instance_count_range));
        }
        for (name, v) in [
            ("background_level", self.background_level),
            ("background_noise_std", self.background_noise_std),
            ("background_texture_amp", self.background_texture_amp),
            ("instance_rotation_max_deg", self.instance_rotation_max_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.vertical_fraction) {
            return Err(format!("vertical_fraction {} outside [0, 1]", self.vertical_fraction));
        }
        if self.instance_rotation_max_deg > 45.0 {
            return Err("instance_rotation_max_deg above 45 is not supported".into());
        }
        if self.image_size < 24 {
            return Err(format!("image_size {} is below the minimum of 24", self.image_size));
        }
        if self.texture_cells == 0 {
            return Err("texture_cells must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A generated image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// H×W grayscale values in `[0, 1]`, multiples of 1/255.
    pub image: Tensor,
    pub mask: BinaryMap,
    pub boxes: Vec<PixelBox>,
    pub domain: Domain,
    pub sample_id: u64,
}

/// An image whose labels have been withheld. Only [`strip_labels`]
/// constructs one, and it exposes no label accessor.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    image: Tensor,
    domain: Domain,
    sample_id: u64,
}

impl UnlabeledSample {
    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn sample_id(&self) -> u64 {
        self.sample_id
    }
}

pub fn strip_labels(sample: LabeledSample) -> UnlabeledSample {
    UnlabeledSample {
        image: sample.image,
        domain: sample.domain,
        sample_id: sample.sample_id,
    }
}

const STROKE: usize = 2;
const CELL: usize = 5;
const PLACEMENT_ATTEMPTS: usize = 100;
const BOX_GAP: usize = 2;

/// Local bitmap of one word: top and bottom rails joined by vertical bars,
/// with an optional mid-height crossbar in each character cell.
fn glyph_word(rng: &mut ChaCha8Rng, max_width: usize) -> BinaryMap {
    let max_chars = ((max_width - STROKE) / CELL).clamp(2, 4);
    let chars = rng.gen_range(2..=max_chars);
    let height = rng.gen_range(6..=9);
    let width = chars * CELL + STROKE;
    let crossbars: Vec<bool> = (0..chars).map(|_| rng.gen_bool(0.5)).collect();
    let mid = height / 2 - 1;
    BinaryMap::from_fn(height, width, |y, x| {
        let rail = y < STROKE || y >= height - STROKE;
        let bar = x % CELL < STROKE;
        let cell = (x / CELL).min(chars - 1);
        let cross = (mid..mid + STROKE).contains(&y) && crossbars[cell];
        rail || bar || cross
    })
}

/// Nearest-neighbour rotation of a bitmap about its centre, cropped to the
/// tight bounding box of the result.
fn rotate_bitmap(src: &BinaryMap, degrees: f64) -> BinaryMap {
    if degrees == 0.0 {
        return src.clone();
    }
    let (h, w) = (src.height() as f64, src.width() as f64);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let out_w = (w * cos.abs() + h * sin.abs()).ceil() as usize + 2;
    let out_h = (w * sin.abs() + h * cos.abs()).ceil() as usize + 2;
    let (cx_src, cy_src) = (w / 2.0, h / 2.0);
    let (cx, cy) = (out_w as f64 / 2.0, out_h as f64 / 2.0);
    let full = BinaryMap::from_fn(out_h, out_w, |y, x| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let sx = cos * dx + sin * dy + cx_src;
        let sy = -sin * dx + cos * dy + cy_src;
        sx >= 0.0 && sy >= 0.0 && sx < w && sy < h && src.get(sy as usize, sx as usize)
    });
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..out_h {
        for x in 0..out_w {
            if full.get(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BinaryMap::from_fn(y1 - y0, x1 - x0, |y, x| full.get(y + y0, x + x0))
}

fn texture(rng: &mut ChaCha8Rng, cells: usize, size: usize) -> Vec<f64> {
    let n = cells + 1;
    let grid: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
    let mut out = Vec::with_capacity(size * size);
    let step = cells as f64 / size as f64;
    for y in 0..size {
        let gy = (y as f64 + 0.5) * step;
        let (iy, fy) = ((gy as usize).min(cells - 1), gy - (gy as usize).min(cells - 1) as f64);
        for x in 0..size {
            let gx = (x as f64 + 0.5) * step;
            let (ix, fx) = ((gx as usize).min(cells - 1), gx - (gx as usize).min(cells - 1) as f64);
            let a = grid[iy * n + ix] * (1.0 - fx) + grid[iy * n + ix + 1] * fx;
            let b = grid[(iy + 1) * n + ix] * (1.0 - fx) + grid[(iy + 1) * n + ix + 1] * fx;
            out.push(a * (1.0 - fy) + b * fy);
        }
    }
    out
}

fn box_blur(pixels: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for y in 0..size {
        for x in 0..size {
            let (mut sum, mut count) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(size) {
                for xx in x.saturating_sub(1)..(x + 2).min(size) {
                    sum += pixels[yy * size + xx];
                    count += 1.0;
                }
            }
            out[y * size + x] = sum / count;
        }
    }
    out
}

/// Quantizes to the 8-bit grid used by the PGM files.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates one sample; a pure function of `(seed, domain, cfg)`.
pub fn gen_sample(seed: u64, domain: Domain, cfg: &DomainConfig) -> LabeledSample {
    debug_assert!(cfg.validate().is_ok(), "invalid domain config");
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.salt().rotate_left(32));

    let mut pixels = vec![cfg.background_level; size * size];
    if cfg.background_texture_amp > 0.0 {
        for (p, t) in pixels.iter_mut().zip(texture(&mut rng, cfg.texture_cells, size)) {
            *p += cfg.background_texture_amp * t;
        }
    }

    let [cmin, cmax] = cfg.instance_count_range;
    let wanted = rng.gen_range(cmin..=cmax);
    let mut mask = BinaryMap::zeros(size, size);
    let mut boxes: Vec<PixelBox> = Vec::new();
    let max_width = (size * 7 / 10).max(CELL * 2 + STROKE);
    for _ in 0..wanted {
        let mut word = glyph_word(&mut rng, max_width);
        if cfg.vertical_fraction > 0.0 && rng.gen_bool(cfg.vertical_fraction) {
            word = BinaryMap::from_fn(word.width(), word.height(), |y, x| word.get(x, y));
        }
        let angle = if cfg.instance_rotation_max_deg > 0.0 {
            rng.gen_range(-cfg.instance_rotation_max_deg..=cfg.instance_rotation_max_deg)
        } else {
            0.0
        };
        let glyph = rotate_bitmap(&word, angle);
        let [lo, hi] = cfg.stroke_intensity_range;
        let intensity = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let (gh, gw) = glyph.shape();
        if gh + 2 > size || gw + 2 > size {
            continue;
        }
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let x = rng.gen_range(1..=size - 1 - gw);
            let y = rng.gen_range(1..=size - 1 - gh);
            let candidate = PixelBox::new(x, y, x + gw, y + gh).expect("glyph is non-empty");
            (!boxes.iter().any(|b| b.near(&candidate, BOX_GAP))).then_some(candidate)
        });
        // Placement failure drops this instance; generation never fails.
        let Some(bbox) = placed else { break };
        for gy in 0..gh {
            for gx in 0..gw {
                if glyph.get(gy, gx) {
                    let (y, x) = (bbox.y_min + gy, bbox.x_min + gx);
                    mask.set(y, x, true);
                    pixels[y * size + x] = intensity;
                }
            }
        }
        boxes.push(bbox);
    }

    if cfg.background_noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.background_noise_std).expect("std is finite and positive");
        for p in pixels.iter_mut() {
            *p += normal.sample(&mut rng);
        }
    }
    if cfg.blur_kernel == Blur::Box3 {
        pixels = box_blur(&pixels, size);
    }
    let data = pixels.into_iter().map(quantize).collect();
    LabeledSample {
        image: Tensor::new(vec![size, size], data).expect("quantized pixels are finite"),
        mask,
        boxes,
        domain,
        sample_id: seed,
    }
}

/// Samples with ids `base_seed .. base_seed + count`.
pub fn gen_split(base_seed: u64, count: usize, domain: Domain, cfg: &DomainConfig) -> Vec<LabeledSample> {
    (0..count as u64).map(|i| gen_sample(base_seed + i, domain, cfg)).collect()
}

/// Mean and variance of the pixels outside the ground-truth mask.
pub fn background_stats(sample: &LabeledSample) -> (f64, f64) {
    let values: Vec<f64> = sample
        .image
        .data()
        .iter()
        .zip(sample.mask.bits())
        .filter(|(_, &m)| m == 0)
        .map(|(&v, _)| v)
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        for domain in [Domain::Synthetic, Domain::Real] {
            let cfg = DomainConfig::default_for(domain);
            let a = gen_sample(42, domain, &cfg);
            let b = gen_sample(42, domain, &cfg);
            assert!(a.image.bitwise_eq(&b.image));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forced_single_instance() {
        let cfg = DomainConfig {
            instance_count_range: [1, 1],
            ..DomainConfig::real()
        };
        for seed in 0..50 {
            assert_eq!(gen_sample(seed, Domain::Real, &cfg).boxes.len(), 1);
        }
    }

    #[test]
    fn labels_are_sound() {
        for domain in [Domain::Synthetic, Domain::Real] {
            let cfg = DomainConfig::default_for(domain);
            for seed in 0..100 {
                let s = gen_sample(seed, domain, &cfg);
                assert!((1..=4).contains(&s.boxes.len()));
                for y in 0..cfg.image_size {
                    for x in 0..cfg.image_size {
                        let inside = s.boxes.iter().filter(|b| b.contains(x, y)).count();
                        if s.mask.get(y, x) {
                            assert_eq!(inside, 1, "seed {seed} pixel ({x},{y})");
                        }
                    }
                }
                for (i, b) in s.boxes.iter().enumerate() {
                    let on = (b.y_min..b.y_max)
                        .flat_map(|y| (b.x_min..b.x_max).map(move |x| (y, x)))
                        .filter(|&(y, x)| s.mask.get(y, x))
                        .count();
                    assert!(on >= cfg.min_instance_area);
                    for other in &s.boxes[i + 1..] {
                        assert_eq!(b.intersection(other), 0);
                    }
                }
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn rotation_keeps_strokes_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..40 {
            let word = glyph_word(&mut rng, 40);
            let rotated = rotate_bitmap(&word, -15.0 + i as f64 * 0.75);
            let comps = crate::detector::connected_components(&rotated);
            assert_eq!(comps.len(), 1, "angle index {i}");
        }
    }

    #[test]
    fn strip_keeps_image() {
        let s = gen_sample(3, Domain::Real, &DomainConfig::real());
        let image = s.image.clone();
        let u = strip_labels(s);
        assert!(u.image().bitwise_eq(&image));
        assert_eq!(u.sample_id(), 3);
    }

    #[test]
    fn hash_tracks_config() {
        let a = DomainConfig::real();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.background_noise_std = 0.051;
        assert_ne!(a.hash(), b.hash());
    }
}
