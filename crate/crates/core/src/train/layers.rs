//! Forward and backward kernels: direct convolution, dense, relu, losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Matrix, Tensor4};

/// A single `(channels, height, width)` image or feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width == 0 {
            return Err(Error::ZeroDimension(vec![channels, height, width]));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature map ({channels},{height},{width}) needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

fn check_conv(input: &FeatureMap, filters: &Tensor4) -> Result<()> {
    let [_, in_ch, _, _] = filters.shape();
    if in_ch != input.channels {
        return Err(Error::ShapeMismatch(format!(
            "filters expect {in_ch} input channels, image has {}",
            input.channels
        )));
    }
    Ok(())
}

/// Stride-1 cross-correlation with zero padding that preserves spatial size.
///
/// Filters are `(out, in, kh, kw)`. Padding is `(kh - 1) / 2` above and
/// `(kw - 1) / 2` to the left; even kernels pad one more below and right.
pub fn conv2d_forward(input: &FeatureMap, filters: &Tensor4) -> Result<FeatureMap> {
    check_conv(input, filters)?;
    let [out_ch, in_ch, kh, kw] = filters.shape();
    let (h, w) = (input.height, input.width);
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let f = filters.as_slice();
    let mut out = FeatureMap::zeros(out_ch, h, w);
    for o in 0..out_ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for c in 0..in_ch {
                    for dy in 0..kh {
                        let Some(iy) = (y + dy).checked_sub(pt).filter(|&v| v < h) else { continue };
                        for dx in 0..kw {
                            let Some(ix) = (x + dx).checked_sub(pl).filter(|&v| v < w) else { continue };
                            acc += f[((o * in_ch + c) * kh + dy) * kw + dx] * input.at(c, iy, ix);
                        }
                    }
                }
                out.data[(o * h + y) * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input and filters.
pub fn conv2d_backward(
    input: &FeatureMap,
    filters: &Tensor4,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, Tensor4)> {
    check_conv(input, filters)?;
    let [out_ch, in_ch, kh, kw] = filters.shape();
    let (h, w) = (input.height, input.width);
    if upstream.shape() != (out_ch, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} for conv output ({out_ch},{h},{w})",
            upstream.shape()
        )));
    }
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let f = filters.as_slice();
    let mut grad_in = FeatureMap::zeros(in_ch, h, w);
    let mut grad_f = Tensor4::zeros(filters.shape());
    let gf = grad_f.as_mut_slice();
    for o in 0..out_ch {
        for y in 0..h {
            for x in 0..w {
                let g = upstream.at(o, y, x);
                if g == 0.0 {
                    continue;
                }
                for c in 0..in_ch {
                    for dy in 0..kh {
                        let Some(iy) = (y + dy).checked_sub(pt).filter(|&v| v < h) else { continue };
                        for dx in 0..kw {
                            let Some(ix) = (x + dx).checked_sub(pl).filter(|&v| v < w) else { continue };
                            let fi = ((o * in_ch + c) * kh + dy) * kw + dx;
                            gf[fi] += g * input.at(c, iy, ix);
                            grad_in.data[(c * h + iy) * w + ix] += g * f[fi];
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_f))
}

/// `W x + b`.
pub fn fc_forward(weights: &Matrix, bias: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if bias.len() != weights.rows() {
        return Err(Error::ShapeMismatch(format!(
            "bias of length {} for {} outputs",
            bias.len(),
            weights.rows()
        )));
    }
    let mut y = weights.matvec(x)?;
    y.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    Ok(y)
}

/// Returns `(∂L/∂x, ∂L/∂W, ∂L/∂b)`.
pub fn fc_backward(weights: &Matrix, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Matrix, Vec<f64>)> {
    if x.len() != weights.cols() || upstream.len() != weights.rows() {
        return Err(Error::ShapeMismatch(format!(
            "fc backward: {}x{} weights, input {}, upstream {}",
            weights.rows(),
            weights.cols(),
            x.len(),
            upstream.len()
        )));
    }
    let grad_x = weights.matvec_transposed(upstream)?;
    let mut grad_w = Matrix::zeros(weights.rows(), weights.cols());
    grad_w.add_outer(1.0, upstream, x);
    Ok((grad_x, grad_w, upstream.to_vec()))
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Passes `upstream` where the pre-activation is strictly positive.
pub fn relu_backward(pre: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre.iter().zip(upstream).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// `½‖p − y‖²`.
    L2,
    /// Softmax of the logits followed by `−Σ y log p`.
    CrossEntropy,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss value and its gradient with respect to `output`.
pub fn loss_eval(loss: Loss, output: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if output.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "output of length {} against target of length {}",
            output.len(),
            target.len()
        )));
    }
    match loss {
        Loss::L2 => {
            let diff: Vec<f64> = output.iter().zip(target).map(|(p, y)| p - y).collect();
            Ok((0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff))
        }
        Loss::CrossEntropy => {
            if target.iter().any(|&y| !(y >= 0.0)) {
                return Err(Error::NotADistribution("negative entry".into()));
            }
            let total: f64 = target.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::NotADistribution(format!("entries sum to {total}")));
            }
            let m = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + output.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let value = target.iter().zip(output).map(|(y, z)| if *y > 0.0 { y * (lse - z) } else { 0.0 }).sum();
            let grad = softmax(output).iter().zip(target).map(|(p, y)| p - y).collect();
            Ok((value, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_filters(s: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(s, |_| rng.random_range(-1.0..1.0))
    }

    /// Padded quadruple loop written independently of the kernel.
    fn naive_conv(input: &FeatureMap, f: &Tensor4) -> FeatureMap {
        let [o_n, c_n, kh, kw] = f.shape();
        let (_, h, w) = input.shape();
        let (pt, pl) = ((kh - 1) as isize / 2, (kw - 1) as isize / 2);
        let mut out = FeatureMap::zeros(o_n, h, w);
        for o in 0..o_n {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0;
                    for c in 0..c_n {
                        for dy in 0..kh as isize {
                            for dx in 0..kw as isize {
                                let (iy, ix) = (y + dy - pt, x + dx - pl);
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                    acc += f.get([o, c, dy as usize, dx as usize]) * input.at(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.as_mut_slice()[(o * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn identity_and_zero_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(2, 4, 5, &mut rng);
        let mut id = Tensor4::zeros([2, 2, 1, 1]);
        id.set([0, 0, 0, 0], 1.0);
        id.set([1, 1, 0, 0], 1.0);
        assert_eq!(conv2d_forward(&x, &id).unwrap(), x);
        let z = conv2d_forward(&x, &Tensor4::zeros([3, 2, 3, 3])).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert!(conv2d_forward(&x, &Tensor4::zeros([3, 1, 3, 3])).is_err());
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (c, h, w, s) in [(3, 6, 5, [4, 3, 3, 3]), (2, 4, 4, [2, 2, 2, 4]), (1, 3, 3, [1, 1, 5, 5])] {
            let x = random_map(c, h, w, &mut rng);
            let f = random_filters(s, &mut rng);
            let got = conv2d_forward(&x, &f).unwrap();
            let want = naive_conv(&x, &f);
            for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_trivial() {
        let x = FeatureMap::new(1, 1, 1, vec![3.0]).unwrap();
        let f = Tensor4::new([1, 1, 1, 1], vec![-2.0]).unwrap();
        let (gi, gf) = conv2d_backward(&x, &f, &FeatureMap::new(1, 1, 1, vec![0.5]).unwrap()).unwrap();
        assert_eq!(gf.as_slice(), &[1.5]);
        assert_eq!(gi.as_slice(), &[-1.0]);
        let (gi, gf) = conv2d_backward(&x, &f, &FeatureMap::zeros(1, 1, 1)).unwrap();
        assert_eq!((gi.as_slice(), gf.as_slice()), (&[0.0][..], &[0.0][..]));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..20 {
            let x = random_map(2, 4, 4, &mut rng);
            let f = random_filters([3, 2, 3, 3], &mut rng);
            let w = random_map(3, 4, 4, &mut rng);
            let obj = |x: &FeatureMap, f: &Tensor4| -> f64 {
                conv2d_forward(x, f).unwrap().as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
            };
            let (gi, gf) = conv2d_backward(&x, &f, &w).unwrap();
            for i in 0..f.len() {
                let (mut fp, mut fm) = (f.clone(), f.clone());
                fp.as_mut_slice()[i] += h;
                fm.as_mut_slice()[i] -= h;
                let fd = (obj(&x, &fp) - obj(&x, &fm)) / (2.0 * h);
                assert!(rel_err(fd, gf.as_slice()[i]) <= 1e-6);
            }
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.as_mut_slice()[i] += h;
                xm.as_mut_slice()[i] -= h;
                let fd = (obj(&xp, &f) - obj(&xm, &f)) / (2.0 * h);
                assert!(rel_err(fd, gi.as_slice()[i]) <= 1e-6);
            }
        }
    }

    #[test]
    fn fc_and_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..20 {
            let wm = Matrix::new(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let obj = |wm: &Matrix, b: &[f64], x: &[f64]| -> f64 {
                let y = relu_forward(&fc_forward(wm, b, x).unwrap());
                y.iter().zip(&u).map(|(p, q)| p * q).sum()
            };
            let pre = fc_forward(&wm, &b, &x).unwrap();
            let g = relu_backward(&pre, &u);
            let (gx, gw, gb) = fc_backward(&wm, &x, &g).unwrap();
            for i in 0..5 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                assert!(rel_err((obj(&wm, &b, &xp) - obj(&wm, &b, &xm)) / (2.0 * h), gx[i]) <= 1e-6);
            }
            for i in 0..15 {
                let (mut wp, mut wn) = (wm.clone(), wm.clone());
                wp.as_mut_slice()[i] += h;
                wn.as_mut_slice()[i] -= h;
                assert!(rel_err((obj(&wp, &b, &x) - obj(&wn, &b, &x)) / (2.0 * h), gw.as_slice()[i]) <= 1e-6);
            }
            for i in 0..3 {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[i] += h;
                bm[i] -= h;
                assert!(rel_err((obj(&wm, &bp, &x) - obj(&wm, &bm, &x)) / (2.0 * h), gb[i]) <= 1e-6);
            }
        }
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        assert_eq!(relu_backward(&[0.0, -1.0, 2.0], &[5.0, 5.0, 5.0]), vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn loss_trivia() {
        let (v, g) = loss_eval(Loss::L2, &[1.0, -2.0], &[1.0, -2.0]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let mut prev = f64::INFINITY;
        for spike in [1.0, 5.0, 10.0, 20.0, 40.0] {
            let (v, _) = loss_eval(Loss::CrossEntropy, &[spike, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-16);
        assert!(matches!(loss_eval(Loss::CrossEntropy, &[0.0, 0.0], &[0.7, 0.7]), Err(Error::NotADistribution(_))));
        assert!(matches!(loss_eval(Loss::CrossEntropy, &[0.0, 0.0], &[1.5, -0.5]), Err(Error::NotADistribution(_))));
        assert!(loss_eval(Loss::L2, &[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut y: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = y.iter().sum();
            y.iter_mut().for_each(|v| *v /= s);
            for loss in [Loss::L2, Loss::CrossEntropy] {
                let (_, g) = loss_eval(loss, &z, &y).unwrap();
                for i in 0..4 {
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[i] += h;
                    zm[i] -= h;
                    let fd = (loss_eval(loss, &zp, &y).unwrap().0 - loss_eval(loss, &zm, &y).unwrap().0) / (2.0 * h);
                    assert!(rel_err(fd, g[i]) <= 1e-6, "{loss:?}: {fd} vs {}", g[i]);
                }
            }
        }
    }
}
