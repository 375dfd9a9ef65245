//! Tape-free numeric kernels. The tape calls into these for both the
//! forward values and the backward passes; inference code calls them
//! directly.

use super::{NumError, Tensor};

/// Probabilities entering the cross-entropy are clamped to `[EPS, 1 - EPS]`.
pub const BCE_EPS: f64 = 1e-7;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    a.map(|v| v * factor)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.mean())
}

/// Geometry of an NCHW convolution with a `[out, in, 3, 3]` kernel.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    pub fn infer(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Self, NumError> {
        let mismatch = || NumError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        let (&[batch, in_channels, height, width], &[out_channels, w_in, 3, 3]) =
            (input.shape(), weight.shape())
        else {
            return Err(mismatch());
        };
        if w_in != in_channels {
            return Err(mismatch());
        }
        if bias.shape() != [out_channels] {
            return Err(NumError::ShapeMismatch {
                op: "conv2d",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.height, self.width]
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Dot product with a fixed four-way split of the accumulation, so the
/// result is reproducible while still vectorizing.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Calls `f(y, sy, x0, x1, dx, tap)` for every output row `y` and kernel tap
/// whose source row `sy` and column window `[x0 + dx, x1 + dx)` are in bounds.
/// Rows are visited outermost so the working set stays a few rows wide.
#[inline]
fn for_each_tap_row(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    for y in 0..h {
        for ky in 0..3 {
            let sy = y as isize + ky as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                f(y, sy as usize, x0, x1, (x0 as isize + dx) as usize, ky * 3 + kx);
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1, over an NCHW batch.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NumError> {
    let d = ConvDims::infer(input, weight, bias)?;
    let (h, w, plane) = (d.height, d.width, d.plane());
    let (ci, co) = (d.in_channels, d.out_channels);
    let mut out = vec![0.0; d.batch * co * plane];
    for s in 0..d.batch {
        let out_s = &mut out[s * co * plane..(s + 1) * co * plane];
        for o in 0..co {
            out_s[o * plane..(o + 1) * plane].fill(bias.data()[o]);
        }
        for c in 0..ci {
            let src = &input.data()[(s * ci + c) * plane..][..plane];
            for_each_tap_row(h, w, |y, sy, x0, x1, sx0, tap| {
                let seg = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                for o in 0..co {
                    let wv = weight.data()[(o * ci + c) * 9 + tap];
                    let base = o * plane + y * w;
                    axpy(&mut out_s[base + x0..base + x1], wv, seg);
                }
            });
        }
    }
    Ok(Tensor::from_parts(d.out_shape(), out))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads, NumError> {
    let d = ConvDims::infer(input, weight, bias)?;
    if grad_out.shape() != d.out_shape().as_slice() {
        return Err(NumError::ShapeMismatch {
            op: "conv2d_backward",
            lhs: d.out_shape(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let (h, w, plane) = (d.height, d.width, d.plane());
    let (ci, co) = (d.in_channels, d.out_channels);
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; co];
    let mut gx = want_input.then(|| vec![0.0; input.len()]);
    for s in 0..d.batch {
        let g_s = &grad_out.data()[s * co * plane..(s + 1) * co * plane];
        for o in 0..co {
            gb[o] += g_s[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        for c in 0..ci {
            let src = &input.data()[(s * ci + c) * plane..][..plane];
            let mut gsrc = gx.as_mut().map(|gx| &mut gx[(s * ci + c) * plane..][..plane]);
            for_each_tap_row(h, w, |y, sy, x0, x1, sx0, tap| {
                let seg = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                for o in 0..co {
                    let base = o * plane + y * w;
                    let g = &g_s[base + x0..base + x1];
                    gw[(o * ci + c) * 9 + tap] += dot(g, seg);
                    if let Some(gsrc) = gsrc.as_mut() {
                        let wv = weight.data()[(o * ci + c) * 9 + tap];
                        axpy(&mut gsrc[sy * w + sx0..sy * w + sx0 + (x1 - x0)], wv, g);
                    }
                }
            });
        }
    }
    Ok(ConvGrads {
        input: gx.map(|v| Tensor::from_parts(input.shape().to_vec(), v)),
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![co], gb),
    })
}

fn check_binary(op: &'static str, t: &Tensor) -> Result<(), NumError> {
    match t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(index) => Err(NumError::NotBinary { op, index }),
        None => Ok(()),
    }
}

/// Per-sample masked binary cross-entropy.
///
/// `pred`, `target` and `mask` share a shape whose leading axis is the
/// sample axis. Sample `n` contributes `sum(mask * bce) / sum(mask)`, or
/// zero when its mask is empty. Returns a `[N]` tensor.
pub fn masked_bce(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor, NumError> {
    same_shape("masked_bce", pred, target)?;
    same_shape("masked_bce", pred, mask)?;
    check_binary("masked_bce target", target)?;
    check_binary("masked_bce mask", mask)?;
    let n = pred.shape()[0];
    let per = pred.len() / n;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let range = s * per..(s + 1) * per;
        let (p, t, m) = (
            &pred.data()[range.clone()],
            &target.data()[range.clone()],
            &mask.data()[range],
        );
        let count: f64 = m.iter().sum();
        if count == 0.0 {
            out.push(0.0);
            continue;
        }
        let mut acc = 0.0;
        for ((&pv, &tv), &mv) in p.iter().zip(t).zip(m) {
            if mv != 0.0 {
                let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
            }
        }
        out.push(acc / count);
    }
    Ok(Tensor::from_parts(vec![n], out))
}

/// Gradient of [`masked_bce`] with respect to `pred`, given the upstream
/// gradient of the `[N]` output.
pub fn masked_bce_backward(pred: &Tensor, target: &Tensor, mask: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = pred.shape()[0];
    let per = pred.len() / n;
    let mut grad = vec![0.0; pred.len()];
    for s in 0..n {
        let range = s * per..(s + 1) * per;
        let count: f64 = mask.data()[range.clone()].iter().sum();
        if count == 0.0 {
            continue;
        }
        let upstream = grad_out.data()[s] / count;
        for i in range {
            if mask.data()[i] == 0.0 {
                continue;
            }
            let pv = pred.data()[i];
            // The clamp has zero derivative outside its interval.
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                continue;
            }
            let tv = target.data()[i];
            grad[i] = upstream * (-tv / pv + (1.0 - tv) / (1.0 - pv));
        }
    }
    Tensor::from_parts(pred.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_basics() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&t(&[1], &[0.0])).data(), &[0.5]);
        // symmetric branches agree
        let a = sigmoid_scalar(3.0);
        let b = 1.0 - sigmoid_scalar(-3.0);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn conv_center_of_ones() {
        let img = Tensor::full(&[1, 1, 5, 5], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&img, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        assert_eq!(out.data()[2 * 5 + 2], 9.0);
        // zero padding: corners see 4 pixels, edges 6
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[2], 6.0);
    }

    #[test]
    fn conv_matches_naive_definition() {
        let (n, ci, co, h, w) = (2, 3, 2, 4, 5);
        let x: Vec<f64> = (0..n * ci * h * w).map(|i| ((i * 37 % 11) as f64) * 0.1 - 0.5).collect();
        let k: Vec<f64> = (0..co * ci * 9).map(|i| ((i * 13 % 7) as f64) * 0.2 - 0.6).collect();
        let b = vec![0.3, -0.2];
        let xt = t(&[n, ci, h, w], &x);
        let kt = t(&[co, ci, 3, 3], &k);
        let out = conv2d(&xt, &kt, &t(&[co], &b)).unwrap();
        for s in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += k[((o * ci + c) * 3 + ky) * 3 + kx]
                                        * x[((s * ci + c) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        let got = out.data()[((s * co + o) * h + y) * w + xx];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_the_op() {
        let err = conv2d(
            &Tensor::zeros(&[1, 2, 4, 4]),
            &Tensor::zeros(&[1, 3, 3, 3]),
            &Tensor::zeros(&[1]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("conv2d"));
        assert!(add(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn bce_half_is_ln2() {
        let l = masked_bce(&t(&[1, 1], &[0.5]), &t(&[1, 1], &[1.0]), &t(&[1, 1], &[1.0])).unwrap();
        assert!((l.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_empty_mask_is_zero() {
        let l = masked_bce(&t(&[1, 2], &[0.2, 0.9]), &t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(l.data(), &[0.0]);
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let err = masked_bce(&t(&[1, 1], &[0.5]), &t(&[1, 1], &[0.3]), &t(&[1, 1], &[1.0])).unwrap_err();
        assert!(matches!(err, NumError::NotBinary { .. }));
    }

    #[test]
    fn bce_clamps_confident_predictions() {
        let l = masked_bce(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[1.0, 1.0])).unwrap();
        assert!(l.data()[0] < 1e-6);
        assert!(l.data()[0] > 0.0);
    }
}
