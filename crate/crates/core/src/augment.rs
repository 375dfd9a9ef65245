//! Photometric jitter and exact geometric transforms.
//!
//! Every geometric transform maps each output pixel to exactly one source
//! pixel, so label maps can be moved into an augmented frame with no
//! interpolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Tensor;
use crate::raster::BinaryMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugError {
    #[error("transform expects a {expected:?} input, got {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("crop window ({x},{y},{w},{h}) is outside a {height}x{width} image")]
    CropOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScaleFactor {
    Half,
    Double,
}

impl ScaleFactor {
    pub fn value(self) -> f64 {
        match self {
            ScaleFactor::Half => 0.5,
            ScaleFactor::Double => 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeoKind {
    Identity,
    /// `[[a,b],[c,d]]` becomes `[[c,a],[d,b]]`: a quarter turn clockwise
    /// when rows run top to bottom.
    Rot90,
    Rot180,
    Rot270,
    Crop { x: usize, y: usize, w: usize, h: usize },
    Scale(ScaleFactor),
}

/// A concrete transform bound to the `(H, W)` of its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GeoTransform {
    pub kind: GeoKind,
    pub source_shape: (usize, usize),
}

impl GeoTransform {
    pub fn new(kind: GeoKind, source_shape: (usize, usize)) -> Result<Self, AugError> {
        let (height, width) = source_shape;
        match kind {
            GeoKind::Crop { x, y, w, h } if w == 0 || h == 0 || x + w > width || y + h > height => {
                Err(AugError::CropOutOfBounds { x, y, w, h, height, width })
            }
            GeoKind::Scale(ScaleFactor::Half) if height < 2 || width < 2 => Err(AugError::InvalidSpec(format!(
                "cannot halve a {height}x{width} image"
            ))),
            _ => Ok(Self { kind, source_shape }),
        }
    }

    pub fn identity(source_shape: (usize, usize)) -> Self {
        Self {
            kind: GeoKind::Identity,
            source_shape,
        }
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let (h, w) = self.source_shape;
        match self.kind {
            GeoKind::Identity | GeoKind::Rot180 => (h, w),
            GeoKind::Rot90 | GeoKind::Rot270 => (w, h),
            GeoKind::Crop { w: cw, h: ch, .. } => (ch, cw),
            GeoKind::Scale(ScaleFactor::Half) => (h / 2, w / 2),
            GeoKind::Scale(ScaleFactor::Double) => (h * 2, w * 2),
        }
    }

    /// Source pixel `(y, x)` that output pixel `(oy, ox)` is copied from.
    pub fn source_of(&self, oy: usize, ox: usize) -> (usize, usize) {
        let (h, w) = self.source_shape;
        match self.kind {
            GeoKind::Identity => (oy, ox),
            GeoKind::Rot90 => (h - 1 - ox, oy),
            GeoKind::Rot180 => (h - 1 - oy, w - 1 - ox),
            GeoKind::Rot270 => (ox, w - 1 - oy),
            GeoKind::Crop { x, y, .. } => (y + oy, x + ox),
            GeoKind::Scale(ScaleFactor::Half) => (2 * oy, 2 * ox),
            GeoKind::Scale(ScaleFactor::Double) => (oy / 2, ox / 2),
        }
    }

    fn check(&self, shape: (usize, usize)) -> Result<(), AugError> {
        if shape != self.source_shape {
            return Err(AugError::ShapeMismatch {
                expected: self.source_shape,
                found: shape,
            });
        }
        Ok(())
    }

    fn remap<T: Copy>(&self, src: &[T]) -> Vec<T> {
        let (_, w) = self.source_shape;
        let (oh, ow) = self.output_shape();
        let mut out = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let (sy, sx) = self.source_of(oy, ox);
                out.push(src[sy * w + sx]);
            }
        }
        out
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        &[h, w] => (h, w),
        other => (other.len(), 0),
    }
}

/// Applies `t` to an H×W image.
pub fn apply_geo(image: &Tensor, t: &GeoTransform) -> Result<Tensor, AugError> {
    t.check(shape2(image))?;
    let (oh, ow) = t.output_shape();
    Ok(Tensor::new(vec![oh, ow], t.remap(image.data())).expect("remapped values are finite"))
}

/// Moves an H×W value map into the frame produced by `t`, returning the
/// moved map and a mask of output pixels that have a source pixel.
pub fn transport_map(map: &Tensor, t: &GeoTransform) -> Result<(Tensor, BinaryMap), AugError> {
    let moved = apply_geo(map, t)?;
    let (oh, ow) = t.output_shape();
    Ok((moved, BinaryMap::ones(oh, ow)))
}

pub fn transport_binary(map: &BinaryMap, t: &GeoTransform) -> Result<BinaryMap, AugError> {
    t.check(map.shape())?;
    let (oh, ow) = t.output_shape();
    Ok(BinaryMap::from_bits(oh, ow, t.remap(map.bits())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterSpec {
    /// Brightness offset is drawn from `[-max, max]`.
    pub brightness_max: f64,
    /// Contrast factor is drawn log-uniformly from this range.
    pub contrast_range: [f64; 2],
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            brightness_max: 0.2,
            contrast_range: [0.8, 1.25],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongKind {
    Rot90,
    Rot180,
    Rot270,
    Crop,
    Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSpec {
    pub weak: JitterSpec,
    pub strong_enabled: bool,
    pub strong_menu: Vec<StrongKind>,
    /// Side of a crop window relative to the image side.
    pub crop_fraction: f64,
    /// Also apply strong transforms to the labeled synthetic stream.
    pub strong_on_synthetic: bool,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            weak: JitterSpec::default(),
            strong_enabled: true,
            strong_menu: vec![StrongKind::Rot90, StrongKind::Rot180, StrongKind::Rot270],
            crop_fraction: 0.75,
            strong_on_synthetic: false,
        }
    }
}

impl AugSpec {
    pub fn validate(&self) -> Result<(), AugError> {
        let JitterSpec {
            brightness_max,
            contrast_range: [lo, hi],
        } = self.weak;
        if !(0.0..=0.2).contains(&brightness_max) {
            return Err(AugError::InvalidSpec(format!("brightness_max {brightness_max} outside [0, 0.2]")));
        }
        if !(0.8 <= lo && lo <= hi && hi <= 1.25) {
            return Err(AugError::InvalidSpec(format!("contrast_range [{lo}, {hi}] outside [0.8, 1.25]")));
        }
        if self.strong_enabled && self.strong_menu.is_empty() {
            return Err(AugError::InvalidSpec("strong_menu is empty while strong_enabled".into()));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(AugError::InvalidSpec(format!("crop_fraction {} outside (0, 1]", self.crop_fraction)));
        }
        Ok(())
    }
}

/// `clip(contrast * (v - 0.5) + 0.5 + brightness, 0, 1)` elementwise.
pub fn jitter_with(image: &Tensor, brightness: f64, contrast: f64) -> Tensor {
    image.map(|v| (contrast * (v - 0.5) + 0.5 + brightness).clamp(0.0, 1.0))
}

pub fn color_jitter(image: &Tensor, seed: u64, spec: &JitterSpec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brightness = if spec.brightness_max > 0.0 {
        rng.gen_range(-spec.brightness_max..=spec.brightness_max)
    } else {
        0.0
    };
    let [lo, hi] = spec.contrast_range;
    let contrast = if hi > lo {
        rng.gen_range(lo.ln()..=hi.ln()).exp()
    } else {
        lo
    };
    jitter_with(image, brightness, contrast)
}

/// Draws a kind uniformly from the menu, then its parameters uniformly.
pub fn sample_strong(seed: u64, spec: &AugSpec, shape: (usize, usize)) -> GeoTransform {
    debug_assert!(spec.strong_enabled && !spec.strong_menu.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = shape;
    let kind = match spec.strong_menu[rng.gen_range(0..spec.strong_menu.len())] {
        StrongKind::Rot90 => GeoKind::Rot90,
        StrongKind::Rot180 => GeoKind::Rot180,
        StrongKind::Rot270 => GeoKind::Rot270,
        StrongKind::Crop => {
            let ch = ((h as f64 * spec.crop_fraction).round() as usize).clamp(1, h);
            let cw = ((w as f64 * spec.crop_fraction).round() as usize).clamp(1, w);
            GeoKind::Crop {
                x: rng.gen_range(0..=w - cw),
                y: rng.gen_range(0..=h - ch),
                w: cw,
                h: ch,
            }
        }
        StrongKind::Scale => {
            if rng.gen_bool(0.5) && h >= 2 && w >= 2 {
                GeoKind::Scale(ScaleFactor::Half)
            } else {
                GeoKind::Scale(ScaleFactor::Double)
            }
        }
    };
    GeoTransform::new(kind, shape).expect("sampled parameters are in bounds")
}
