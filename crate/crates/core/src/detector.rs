//! Tiny fully-convolutional per-pixel text detector and its
//! post-processing from probability maps to boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{ops, GradMap, Gradients, NumError, ParamSet, Tape, Tensor, Var};
use crate::raster::{BinaryMap, PixelBox};

/// Shared threshold for box extraction and pseudo-labels.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_AREA: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Channel widths from input to output, e.g. `[1, 8, 8, 1]`.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub init_scale: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: vec![1, 8, 8, 1],
            kernel: 3,
            init_scale: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.channels.len() < 3 {
            return Err(format!("need at least 2 layers, got channels {:?}", self.channels));
        }
        if self.channels.first() != Some(&1) || self.channels.last() != Some(&1) {
            return Err(format!("channels must start and end with 1, got {:?}", self.channels));
        }
        if self.channels.contains(&0) {
            return Err("channel widths must be positive".into());
        }
        if self.kernel != 3 {
            return Err(format!("only 3x3 kernels are supported, got {}", self.kernel));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(format!("init_scale must be finite and >= 0, got {}", self.init_scale));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len() - 1
    }

    /// Parameter names in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|i| [weight_name(i), bias_name(i)])
            .collect()
    }
}

fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Weights ~ U(-init_scale, init_scale), biases zero.
pub fn init_detector(cfg: &DetectorConfig, seed: u64) -> Result<ParamSet, NumError> {
    cfg.validate().map_err(|_| NumError::InvalidShape {
        shape: cfg.channels.clone(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (i, pair) in cfg.channels.windows(2).enumerate() {
        let (cin, cout) = (pair[0], pair[1]);
        let n = cout * cin * 9;
        let s = cfg.init_scale;
        let w = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * s).collect();
        params.insert(weight_name(i), Tensor::new(vec![cout, cin, 3, 3], w)?)?;
        params.insert(bias_name(i), Tensor::zeros(&[cout]))?;
    }
    Ok(params)
}

fn layer_count(params: &ParamSet) -> Result<usize, NumError> {
    let n = params.len() / 2;
    if n == 0 || params.len() % 2 != 0 {
        return Err(NumError::InvalidShape { shape: vec![params.len()] });
    }
    for i in 0..n {
        for name in [weight_name(i), bias_name(i)] {
            if params.get(&name).is_none() {
                return Err(NumError::UnknownParam { name });
            }
        }
    }
    Ok(n)
}

/// A [`ParamSet`] registered on a tape as trainable leaves.
pub struct ParamVars<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> ParamVars<'t> {
    pub fn attach(tape: &'t Tape, params: &ParamSet) -> Self {
        let vars = params
            .iter()
            .map(|(name, e)| (name.to_string(), tape.param(name, e.value.clone())))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Option<&Var<'t>> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Gradients of this set's leaves, keyed by parameter name.
    pub fn grads(&self, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .wrt(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&var.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Recorded forward pass: `[N, 1, H, W]` images to `[N, 1, H, W]` probabilities.
pub fn forward<'t>(params: &ParamVars<'t>, images: &Var<'t>) -> Result<Var<'t>, NumError> {
    let layers = params.vars.len() / 2;
    let mut h = *images;
    for i in 0..layers {
        let w = params.get(&weight_name(i)).ok_or(NumError::UnknownParam { name: weight_name(i) })?;
        let b = params.get(&bias_name(i)).ok_or(NumError::UnknownParam { name: bias_name(i) })?;
        h = h.conv2d(w, b)?;
        h = if i + 1 < layers { h.relu() } else { h.sigmoid() };
    }
    Ok(h)
}

/// Tape-free forward pass over an `[N, 1, H, W]` batch.
pub fn predict_batch(params: &ParamSet, images: &Tensor) -> Result<Tensor, NumError> {
    let layers = layer_count(params)?;
    let mut h = images.clone();
    for i in 0..layers {
        let w = params.get(&weight_name(i)).expect("checked by layer_count");
        let b = params.get(&bias_name(i)).expect("checked by layer_count");
        h = ops::conv2d(&h, w, b)?;
        h = if i + 1 < layers { ops::relu(&h) } else { ops::sigmoid(&h) };
    }
    Ok(h)
}

/// Stacks equally sized H×W maps into an `[N, 1, H, W]` batch.
pub fn stack(maps: &[&Tensor]) -> Result<Tensor, NumError> {
    let first = maps.first().ok_or(NumError::InvalidShape { shape: vec![0] })?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(maps.len() * first.len());
    for m in maps {
        if m.shape() != shape.as_slice() {
            return Err(NumError::ShapeMismatch {
                op: "stack",
                lhs: shape,
                rhs: m.shape().to_vec(),
            });
        }
        data.extend_from_slice(m.data());
    }
    let mut full = vec![maps.len(), 1];
    full.extend_from_slice(&shape);
    Tensor::new(full, data)
}

/// Splits an `[N, 1, H, W]` probability batch into per-image maps.
pub fn unstack(batch: &Tensor) -> Result<Vec<ProbMap>, NumError> {
    let &[n, 1, h, w] = batch.shape() else {
        return Err(NumError::ShapeMismatch {
            op: "unstack",
            lhs: batch.shape().to_vec(),
            rhs: vec![0, 1, 0, 0],
        });
    };
    batch
        .data()
        .chunks(h * w)
        .take(n)
        .map(|c| ProbMap::new(Tensor::new(vec![h, w], c.to_vec())?))
        .collect()
}

/// Per-pixel text probabilities for one H×W image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub fn new(t: Tensor) -> Result<Self, NumError> {
        if t.shape().len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "prob_map",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        if let Some(index) = t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(NumError::NonFinite { op: "prob_map", index });
        }
        Ok(Self(t))
    }

    pub fn uniform(height: usize, width: usize, p: f64) -> Self {
        Self::new(Tensor::full(&[height, width], p)).expect("p in [0, 1]")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.data()[y * self.width() + x]
    }
}

/// Probability map for a single H×W image.
pub fn predict(params: &ParamSet, image: &Tensor) -> Result<ProbMap, NumError> {
    let &[h, w] = image.shape() else {
        return Err(NumError::ShapeMismatch {
            op: "predict",
            lhs: image.shape().to_vec(),
            rhs: vec![0, 0],
        });
    };
    let batch = image.clone().reshape(vec![1, 1, h, w])?;
    let out = predict_batch(params, &batch)?;
    ProbMap::new(out.reshape(vec![h, w])?)
}

/// Mean over samples of the masked BCE between predicted probabilities and
/// ground truth. Samples with no valid pixel contribute zero.
pub fn det_loss<'t>(pred: &Var<'t>, gt: &Tensor, valid: &Tensor) -> Result<Var<'t>, NumError> {
    let per_sample = pred.masked_bce(gt, valid)?;
    let n = pred.shape()[0];
    let per = valid.len() / n;
    let empty = valid.data().chunks(per).filter(|c| c.iter().all(|&v| v == 0.0)).count();
    if empty > 0 {
        log::warn!("{empty} of {n} samples have no valid pixels; their loss is zero");
    }
    Ok(per_sample.mean())
}

/// `1` where the probability is at least `threshold`.
pub fn binarize(pm: &ProbMap, threshold: f64) -> BinaryMap {
    BinaryMap::from_fn(pm.height(), pm.width(), |y, x| pm.at(y, x) >= threshold)
}

/// One 4-connected component of a binary map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub bbox: PixelBox,
    pub area: usize,
}

/// 4-connected components in row-major discovery order.
pub fn connected_components(bin: &BinaryMap) -> Vec<Component> {
    let (h, w) = bin.shape();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || bin.bits()[start] == 0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |j: usize| {
                if !seen[j] && bin.bits()[j] != 0 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        out.push(Component {
            bbox: PixelBox::new(x0, y0, x1, y1).expect("non-empty component"),
            area,
        });
    }
    out
}

/// Bounding boxes of components with at least `min_area` pixels, sorted
/// by `(y_min, x_min)`.
pub fn extract_boxes(bin: &BinaryMap, min_area: usize) -> Vec<PixelBox> {
    let mut boxes: Vec<PixelBox> = connected_components(bin)
        .into_iter()
        .filter(|c| c.area >= min_area)
        .map(|c| c.bbox)
        .collect();
    boxes.sort_by_key(|b| (b.y_min, b.x_min, b.y_max, b.x_max));
    boxes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: PixelBox,
    /// Mean probability inside the box.
    pub score: f64,
}

/// Full post-processing: binarize, extract boxes, score them.
pub fn detect(pm: &ProbMap, threshold: f64, min_area: usize) -> Vec<Detection> {
    extract_boxes(&binarize(pm, threshold), min_area)
        .into_iter()
        .map(|bbox| {
            let mut sum = 0.0;
            for y in bbox.y_min..bbox.y_max {
                for x in bbox.x_min..bbox.x_max {
                    sum += pm.at(y, x);
                }
            }
            Detection {
                bbox,
                score: sum / bbox.area() as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        let p = init_detector(&DetectorConfig::default(), 1).unwrap();
        assert_eq!(p.num_scalars(), (8 * 9 + 8) + (8 * 8 * 9 + 8) + (8 * 9 + 1));
        assert_eq!(p.num_scalars(), 737);
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, DetectorConfig::default().param_names());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = DetectorConfig::default();
        let a = init_detector(&cfg, 9).unwrap();
        assert_eq!(a, init_detector(&cfg, 9).unwrap());
        assert_ne!(a, init_detector(&cfg, 10).unwrap());
        for (name, e) in a.iter() {
            if name.ends_with("bias") {
                assert!(e.value.data().iter().all(|&v| v == 0.0));
            } else {
                assert!(e.value.data().iter().all(|&v| v.abs() <= 0.1));
            }
        }
    }

    #[test]
    fn zero_init_predicts_half() {
        let cfg = DetectorConfig {
            init_scale: 0.0,
            ..Default::default()
        };
        let p = init_detector(&cfg, 3).unwrap();
        let img = Tensor::full(&[6, 7], 0.3);
        let pm = predict(&p, &img).unwrap();
        assert_eq!((pm.height(), pm.width()), (6, 7));
        assert!(pm.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn tape_and_inference_agree() {
        let p = init_detector(&DetectorConfig::default(), 4).unwrap();
        let img = Tensor::new(vec![2, 1, 5, 6], (0..60).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let tape = Tape::new();
        let vars = ParamVars::attach(&tape, &p);
        let x = tape.constant(img.clone());
        let y = forward(&vars, &x).unwrap();
        assert!(y.value().bitwise_eq(&predict_batch(&p, &img).unwrap()));
    }

    #[test]
    fn det_loss_of_uniform_half_is_ln2() {
        let tape = Tape::new();
        let pred = tape.var(Tensor::full(&[2, 1, 3, 3], 0.5));
        let gt = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| (i % 2) as f64).collect()).unwrap();
        let loss = det_loss(&pred, &gt, &Tensor::full(&[2, 1, 3, 3], 1.0)).unwrap();
        assert!((loss.value().data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let all_invalid = det_loss(&pred, &gt, &Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        assert_eq!(all_invalid.value().data(), &[0.0]);
    }

    #[test]
    fn binarize_boundary_and_monotone() {
        assert_eq!(binarize(&ProbMap::uniform(3, 3, 0.9), 0.5).count_ones(), 9);
        assert_eq!(binarize(&ProbMap::uniform(3, 3, 0.5), 0.5).count_ones(), 9);
        let pm = ProbMap::new(Tensor::new(vec![1, 5], vec![0.1, 0.3, 0.5, 0.7, 0.9]).unwrap()).unwrap();
        let mut prev = binarize(&pm, 0.05);
        for t in [0.2, 0.4, 0.6, 0.8, 0.95] {
            let cur = binarize(&pm, t);
            for x in 0..5 {
                assert!(!cur.get(0, x) || prev.get(0, x));
            }
            prev = cur;
        }
    }

    #[test]
    fn square_gives_one_box() {
        let bin = BinaryMap::from_fn(12, 12, |y, x| (3..8).contains(&y) && (4..9).contains(&x));
        assert_eq!(extract_boxes(&bin, 8), vec![PixelBox::new(4, 3, 9, 8).unwrap()]);
        assert!(extract_boxes(&BinaryMap::zeros(5, 5), 1).is_empty());
    }

    #[test]
    fn diagonal_neighbours_are_separate() {
        let bin = BinaryMap::from_fn(4, 4, |y, x| (y, x) == (0, 0) || (y, x) == (1, 1));
        assert_eq!(connected_components(&bin).len(), 2);
    }

    #[test]
    fn small_components_are_dropped_and_sorted() {
        let bin = BinaryMap::from_fn(10, 10, |y, x| {
            (y < 3 && x >= 6) || (y >= 6 && x < 3) || (y == 8 && x == 8)
        });
        let boxes = extract_boxes(&bin, 8);
        assert_eq!(boxes.len(), 2);
        assert!(boxes[0].y_min <= boxes[1].y_min);
        let dets = detect(&ProbMap::new(bin.to_tensor()).unwrap(), 0.5, 8);
        assert!(dets.iter().all(|d| d.score == 1.0));
    }
}
