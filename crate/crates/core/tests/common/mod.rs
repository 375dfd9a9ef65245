//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use units_core::detector::{det_loss, forward, init_detector, DetectorConfig, ParamVars};
use units_core::numcore::{ParamSet, Tape, Var};
use units_core::detector::Component;
use units_core::evalkit::iou;
use units_core::numcore::Tensor;
use units_core::raster::{BinaryMap, PixelBox};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator, so that gradients that
/// are zero up to rounding do not blow the ratio up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Central differences of `f` with respect to every scalar of `inputs`.
pub fn numeric_grads(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let bump = |delta: f64| {
                let mut xs = inputs.to_vec();
                let mut d = xs[k].data().to_vec();
                d[i] += delta;
                xs[k] = Tensor::new(xs[k].shape().to_vec(), d).unwrap();
                f(&xs)
            };
            *gi = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
        }
        out.push(Tensor::new(inputs[k].shape().to_vec(), g).unwrap());
    }
    out
}

/// True when `f` has a kink within one step of any input coordinate: the
/// one-sided slopes disagree far beyond what curvature explains.
pub fn near_kink(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor]) -> bool {
    let f0 = f(inputs);
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let bump = |delta: f64| {
                let mut xs = inputs.to_vec();
                let mut d = xs[k].data().to_vec();
                d[i] += delta;
                xs[k] = Tensor::new(xs[k].shape().to_vec(), d).unwrap();
                f(&xs)
            };
            let right = (bump(FD_STEP) - f0) / FD_STEP;
            let left = (f0 - bump(-FD_STEP)) / FD_STEP;
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1e-2) {
                return true;
            }
        }
    }
    false
}

/// Largest relative error between analytic and numeric gradients.
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.shape(), n.shape());
            a.data().iter().zip(n.data()).map(|(&x, &y)| rel_err(x, y)).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn random_binary(rng: &mut impl Rng, shape: &[usize], p: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

pub fn random_map(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMap {
    let bits = (0..h * w).map(|_| rng.gen_bool(p) as u8).collect();
    BinaryMap::from_bits(h, w, bits)
}

/// Breadth-first labeling, components in order of their first pixel.
pub fn flood_fill_components(map: &BinaryMap) -> Vec<Component> {
    let (h, w) = map.shape();
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !map.get(y, x) || label[y * w + x] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut queue = VecDeque::from([(y, x)]);
            label[y * w + x] = id;
            let (mut x0, mut y0, mut x1, mut y1, mut area) = (x, y, x, y, 0);
            while let Some((cy, cx)) = queue.pop_front() {
                area += 1;
                x0 = x0.min(cx);
                y0 = y0.min(cy);
                x1 = x1.max(cx);
                y1 = y1.max(cy);
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && map.get(ny, nx) && label[ny * w + nx] == usize::MAX {
                        label[ny * w + nx] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
            out.push(Component {
                bbox: PixelBox::new(x0, y0, x1 + 1, y1 + 1).unwrap(),
                area,
            });
        }
    }
    out
}

/// Size of a maximum one-to-one matching over pairs with IoU at least
/// `threshold`, by exhaustive search.
pub fn brute_force_matching(preds: &[PixelBox], gts: &[PixelBox], threshold: f64) -> usize {
    fn go(p: usize, preds: &[PixelBox], gts: &[PixelBox], used: &mut [bool], threshold: f64) -> usize {
        if p == preds.len() {
            return 0;
        }
        let mut best = go(p + 1, preds, gts, used, threshold);
        for g in 0..gts.len() {
            let v = iou(&preds[p], &gts[g]);
            if !used[g] && v >= threshold && v > 0.0 {
                used[g] = true;
                best = best.max(1 + go(p + 1, preds, gts, used, threshold));
                used[g] = false;
            }
        }
        best
    }
    go(0, preds, gts, &mut vec![false; gts.len()], threshold)
}

pub fn random_box(rng: &mut impl Rng, size: usize) -> PixelBox {
    let x0 = rng.gen_range(0..size - 1);
    let y0 = rng.gen_range(0..size - 1);
    let x1 = rng.gen_range(x0 + 1..=size);
    let y1 = rng.gen_range(y0 + 1..=size);
    PixelBox::new(x0, y0, x1, y1).unwrap()
}

/// A matching instance whose positive IoUs are pairwise distinct. Ground
/// truth boxes are random; each prediction jitters a random ground truth
/// box so that many pairs clear the threshold.
pub fn matching_instance(rng: &mut impl Rng, size: usize) -> (Vec<PixelBox>, Vec<PixelBox>) {
    loop {
        let ng = rng.gen_range(0..=6);
        let np = rng.gen_range(0..=6);
        let gts: Vec<PixelBox> = (0..ng).map(|_| random_box(rng, size)).collect();
        let preds: Vec<PixelBox> = (0..np)
            .map(|_| {
                if gts.is_empty() || rng.gen_bool(0.2) {
                    return random_box(rng, size);
                }
                let g = gts[rng.gen_range(0..gts.len())];
                let mut j = |v: usize, lo: usize, hi: usize| {
                    (v as i64 + rng.gen_range(-1i64..=1)).clamp(lo as i64, hi as i64) as usize
                };
                let x0 = j(g.x_min, 0, size - 1);
                let y0 = j(g.y_min, 0, size - 1);
                let x1 = j(g.x_max, x0 + 1, size);
                let y1 = j(g.y_max, y0 + 1, size);
                PixelBox::new(x0, y0, x1, y1).unwrap()
            })
            .collect();
        let mut values: Vec<f64> = preds
            .iter()
            .flat_map(|p| gts.iter().map(move |g| iou(p, g)))
            .filter(|&v| v > 0.0)
            .collect();
        values.sort_by(f64::total_cmp);
        if values.windows(2).all(|w| w[0] != w[1]) {
            return (preds, gts);
        }
    }
}

type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

fn check(build: &Build, inputs: &[Tensor]) -> Option<f64> {
    let f = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.var(x.clone())).collect();
        build(&tape, &vars).value().data()[0]
    };
    if near_kink(&f, inputs) {
        return None;
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let grads = tape.backward(build(&tape, &vars)).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    Some(max_rel_err(&analytic, &numeric_grads(&f, inputs)))
}

/// Turns any `[N, ...]` tensor into a scalar through sigmoid and masked
/// BCE against fixed random targets, so every output element matters.
fn reducer<'t>(x: &Var<'t>, target: &Tensor, mask: &Tensor) -> Var<'t> {
    x.sigmoid().masked_bce(target, mask).unwrap().mean()
}

fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error per differentiable piece over `trials` random
/// small-shape trials. Trials that land within a step of a ReLU kink are
/// redrawn.
pub fn gradcheck_suite(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["add", "scale", "relu", "sigmoid", "mean", "conv2d", "masked_bce", "detector_loss"];
    let mut worst = vec![0.0f64; names.len()];
    let mut done = 0;
    while done < trials {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=2);
        let h = rng.gen_range(3..=5);
        let w = rng.gen_range(3..=5);
        let shape = [n, c, h, w];
        let target = random_binary(&mut rng, &shape, 0.5);
        let mut mask = random_binary(&mut rng, &shape, 0.8);
        let mut md = mask.data().to_vec();
        md[0] = 1.0;
        mask = Tensor::new(shape.to_vec(), md).unwrap();
        let factor = rng.gen_range(-2.0..2.0);
        let mut errs: Vec<Option<f64>> = Vec::new();

        let (t, m) = (target.clone(), mask.clone());
        errs.push(check(
            &move |_, v| reducer(&v[0].add(&v[1]).unwrap(), &t, &m),
            &[random_tensor(&mut rng, &shape, 1.0), random_tensor(&mut rng, &shape, 1.0)],
        ));
        let (t, m) = (target.clone(), mask.clone());
        errs.push(check(&move |_, v| reducer(&v[0].scale(factor), &t, &m), &[random_tensor(&mut rng, &shape, 1.0)]));
        let (t, m) = (target.clone(), mask.clone());
        errs.push(check(&move |_, v| reducer(&v[0].relu(), &t, &m), &[away_from_zero(&mut rng, &shape)]));
        let (t, m) = (target.clone(), mask.clone());
        errs.push(check(
            &move |_, v| v[0].sigmoid().masked_bce(&t, &m).unwrap().mean(),
            &[random_tensor(&mut rng, &shape, 3.0)],
        ));
        errs.push(check(&|_, v| v[0].mean(), &[random_tensor(&mut rng, &shape, 1.0)]));
        let out_c = rng.gen_range(1..=2);
        let out_shape = [n, out_c, h, w];
        let (t, m) = (random_binary(&mut rng, &out_shape, 0.5), Tensor::full(&out_shape, 1.0));
        errs.push(check(
            &move |_, v| reducer(&v[0].conv2d(&v[1], &v[2]).unwrap(), &t, &m),
            &[
                random_tensor(&mut rng, &shape, 1.0),
                random_tensor(&mut rng, &[out_c, c, 3, 3], 0.5),
                random_tensor(&mut rng, &[out_c], 0.5),
            ],
        ));
        let probs = Tensor::new(shape.to_vec(), (0..target.len()).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
        let (t, m) = (target.clone(), mask.clone());
        errs.push(check(&move |_, v| v[0].masked_bce(&t, &m).unwrap().mean(), &[probs]));

        let cfg = DetectorConfig {
            channels: vec![1, 2, 2, 1],
            ..DetectorConfig::default()
        };
        let params = init_detector(&cfg, rng.gen()).unwrap();
        let names_in: Vec<String> = params.names().map(String::from).collect();
        let values: Vec<Tensor> = names_in.iter().map(|k| params.get(k).unwrap().clone()).collect();
        let img_shape = [n, 1, h, w];
        let image = random_tensor(&mut rng, &img_shape, 1.0);
        let gt = random_binary(&mut rng, &img_shape, 0.3);
        let valid = Tensor::full(&img_shape, 1.0);
        errs.push(detector_check(&names_in, &values, &image, &gt, &valid));

        if errs.iter().any(Option::is_none) {
            continue;
        }
        for (wst, e) in worst.iter_mut().zip(errs) {
            *wst = wst.max(e.unwrap());
        }
        done += 1;
    }
    names.into_iter().zip(worst).collect()
}

fn detector_check(names: &[String], values: &[Tensor], image: &Tensor, gt: &Tensor, valid: &Tensor) -> Option<f64> {
    let set = |xs: &[Tensor]| {
        let mut ps = ParamSet::new();
        for (k, x) in names.iter().zip(xs) {
            ps.insert(k.clone(), x.clone()).unwrap();
        }
        ps
    };
    let f = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars = ParamVars::attach(&tape, &set(xs));
        let pred = forward(&vars, &tape.constant(image.clone())).unwrap();
        det_loss(&pred, gt, valid).unwrap().value().data()[0]
    };
    if near_kink(&f, values) {
        return None;
    }
    let tape = Tape::new();
    let vars = ParamVars::attach(&tape, &set(values));
    let pred = forward(&vars, &tape.constant(image.clone())).unwrap();
    let grads = vars.grads(&tape.backward(det_loss(&pred, gt, valid).unwrap()).unwrap());
    let analytic: Vec<Tensor> = names.iter().map(|k| grads[k].clone()).collect();
    Some(max_rel_err(&analytic, &numeric_grads(&f, values)))
}

/// Pushes every source pixel to where the transform sends it; the inverse
/// of how the library pulls pixels.
pub fn forward_transform(map: &BinaryMap, kind: units_core::augment::GeoKind) -> BinaryMap {
    use units_core::augment::{GeoKind, ScaleFactor};
    let (h, w) = map.shape();
    let out_shape = match kind {
        GeoKind::Identity | GeoKind::Rot180 => (h, w),
        GeoKind::Rot90 | GeoKind::Rot270 => (w, h),
        GeoKind::Crop { w: cw, h: ch, .. } => (ch, cw),
        GeoKind::Scale(ScaleFactor::Half) => (h / 2, w / 2),
        GeoKind::Scale(ScaleFactor::Double) => (2 * h, 2 * w),
    };
    let mut out = BinaryMap::zeros(out_shape.0, out_shape.1);
    for y in 0..h {
        for x in 0..w {
            let on = map.get(y, x);
            let targets: Vec<(usize, usize)> = match kind {
                GeoKind::Identity => vec![(y, x)],
                // [[a,b],[c,d]] becomes [[c,a],[d,b]]: the left column becomes the top row.
                GeoKind::Rot90 => vec![(x, h - 1 - y)],
                GeoKind::Rot180 => vec![(h - 1 - y, w - 1 - x)],
                GeoKind::Rot270 => vec![(w - 1 - x, y)],
                GeoKind::Crop { x: cx, y: cy, w: cw, h: ch } => {
                    if (cx..cx + cw).contains(&x) && (cy..cy + ch).contains(&y) {
                        vec![(y - cy, x - cx)]
                    } else {
                        vec![]
                    }
                }
                GeoKind::Scale(ScaleFactor::Half) => {
                    if y % 2 == 0 && x % 2 == 0 && y / 2 < h / 2 && x / 2 < w / 2 {
                        vec![(y / 2, x / 2)]
                    } else {
                        vec![]
                    }
                }
                GeoKind::Scale(ScaleFactor::Double) => {
                    vec![(2 * y, 2 * x), (2 * y + 1, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x + 1)]
                }
            };
            for (ty, tx) in targets {
                out.set(ty, tx, on);
            }
        }
    }
    out
}

pub struct UnitsFixture {
    pub synth: units_core::units::SynthBatch,
    pub unlabeled: Vec<units_core::scenegen::UnlabeledSample>,
}

/// A two-image synthetic batch and a three-image unlabeled batch at the
/// smallest supported image size.
pub fn units_fixture(seed: u64) -> UnitsFixture {
    use units_core::detector::stack;
    use units_core::scenegen::{gen_sample, strip_labels, Domain, DomainConfig};
    let syn_cfg = DomainConfig {
        image_size: 24,
        ..DomainConfig::synthetic()
    };
    let real_cfg = DomainConfig {
        image_size: 24,
        ..DomainConfig::real()
    };
    let samples: Vec<_> = (0..2).map(|i| gen_sample(seed * 10 + i, Domain::Synthetic, &syn_cfg)).collect();
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let targets: Vec<Tensor> = samples.iter().map(|s| s.mask.to_tensor()).collect();
    let targets = stack(&targets.iter().collect::<Vec<_>>()).unwrap();
    let synth = units_core::units::SynthBatch {
        images: stack(&images).unwrap(),
        valid: Tensor::full(targets.shape(), 1.0),
        targets,
    };
    let unlabeled = (0..3)
        .map(|i| strip_labels(gen_sample(seed * 10 + 5 + i, Domain::Real, &real_cfg)))
        .collect();
    UnitsFixture { synth, unlabeled }
}

pub fn bytes(p: &ParamSet) -> Vec<u8> {
    units_core::numcore::checkpoint::encode(p).unwrap()
}

pub fn all_zero(grads: &units_core::numcore::GradMap) -> bool {
    grads.values().all(|g| g.data().iter().all(|&v| v == 0.0 && v.is_sign_positive()))
}

/// A configuration small enough to run every stage in well under a second.
pub fn tiny_config() -> units_core::pipeline::ExperimentConfig {
    let mut cfg = units_core::pipeline::ExperimentConfig::default();
    cfg.seeds = vec![3];
    cfg.data.synthetic.image_size = 24;
    cfg.data.real.image_size = 24;
    cfg.data.splits.synthetic_pool = 12;
    cfg.data.splits.real_train = 4;
    cfg.data.splits.real_unlabeled = 6;
    cfg.data.splits.real_test = 4;
    cfg.detector.channels = vec![1, 4, 4, 1];
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch = 4;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch = 4;
    cfg.units.unlabeled_batch = 3;
    cfg
}
