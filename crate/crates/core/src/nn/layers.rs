//! Layer kernels as free functions: every forward has a matching backward
//! that returns exact gradients of the forward map.

use crate::error::{NnError, ShapeError};

use super::scalar::{matmul, matmul_nt, matmul_tn, Scalar};
use super::tensor::Tensor;

/// Output extent of a convolution along one axis, or `None` when the
/// kernel does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_geometry<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeometry, ShapeError> {
    let [_, c, h, w] = input.shape();
    let [_, wc, kh, kw] = weights.shape();
    if wc != c || kh != kw {
        return Err(ShapeError::new(format!(
            "conv2d: input {:?} incompatible with weights {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    let (Some(out_h), Some(out_w)) = (conv_out_dim(h, kh, stride, pad), conv_out_dim(w, kw, stride, pad)) else {
        return Err(ShapeError::new(format!(
            "conv2d: input {:?} too small for weights {:?} (stride {stride}, pad {pad})",
            input.shape(),
            weights.shape()
        )));
    };
    Ok(ConvGeometry {
        in_channels: c,
        in_h: h,
        in_w: w,
        kernel: kh,
        stride,
        pad,
        out_h,
        out_w,
    })
}

/// Unfolds one batch item (`C x H x W`) into a `(C k k) x (Ho Wo)` matrix.
fn im2col<T: Scalar>(src: &[T], g: &ConvGeometry, col: &mut [T]) {
    let k = g.kernel;
    let cols = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &src[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * cols..][..cols];
                for oy in 0..g.out_h {
                    let out_row = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let in_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        // ix = ox + kx - pad, valid for ox in [lo, hi).
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.in_w as isize - shift).clamp(lo as isize, g.out_w as isize) as usize;
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let start = (lo as isize + shift) as usize;
                        out_row[lo..hi].copy_from_slice(&in_row[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < g.in_w as isize {
                                in_row[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let k = g.kernel;
    let cols = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &mut dst[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * cols..][..cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let in_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let out_row = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.in_w as isize - shift).clamp(lo as isize, g.out_w as isize) as usize;
                        let start = (lo as isize + shift) as usize;
                        for (d, &v) in in_row[start..start + (hi - lo)].iter_mut().zip(&out_row[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, &v) in out_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            in_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `weights` is `out x in x k x k`, `bias` has `out`
/// entries.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, ShapeError> {
    let g = conv_geometry(input, weights, stride, pad)?;
    let out_c = weights.batch();
    if bias.len() != out_c {
        return Err(ShapeError::new(format!(
            "conv2d: bias has {} entries for {out_c} filters",
            bias.len()
        )));
    }
    let n = input.batch();
    let mut out = Tensor::zeros([n, out_c, g.out_h, g.out_w]);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    for b in 0..n {
        let src = input.item(b);
        let colm: &[T] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut col);
            &col
        };
        let dst = out.item_mut(b);
        for (o, plane) in dst.chunks_exact_mut(cols).enumerate() {
            plane.fill(bias[o]);
        }
        matmul(out_c, rows, cols, weights.as_slice(), colm, T::one(), dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>), ShapeError> {
    let g = conv_geometry(input, weights, stride, pad)?;
    let out_c = weights.batch();
    if d_out.shape() != [input.batch(), out_c, g.out_h, g.out_w] {
        return Err(ShapeError::new(format!(
            "conv2d backward: gradient {:?} does not match output [{}, {out_c}, {}, {}]",
            d_out.shape(),
            input.batch(),
            g.out_h,
            g.out_w
        )));
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut d_in = Tensor::zeros(input.shape());
    let mut d_w = Tensor::zeros(weights.shape());
    let mut d_b = vec![T::zero(); out_c];
    let mut col = vec![T::zero(); rows * cols];
    let mut d_col = vec![T::zero(); rows * cols];
    for b in 0..input.batch() {
        let dy = d_out.item(b);
        for (o, plane) in dy.chunks_exact(cols).enumerate() {
            d_b[o] += plane.iter().copied().sum::<T>();
        }
        if g.is_pointwise() {
            matmul_nt(out_c, cols, rows, dy, input.item(b), T::one(), d_w.as_mut_slice());
            matmul_tn(rows, out_c, cols, weights.as_slice(), dy, T::zero(), d_in.item_mut(b));
        } else {
            im2col(input.item(b), &g, &mut col);
            matmul_nt(out_c, cols, rows, dy, &col, T::one(), d_w.as_mut_slice());
            matmul_tn(rows, out_c, cols, weights.as_slice(), dy, T::zero(), &mut d_col);
            col2im(&d_col, &g, d_in.item_mut(b));
        }
    }
    Ok((d_in, d_w, d_b))
}

/// Small enough that already-standardized data passes through unchanged to
/// within 1e-6 (the shift is about eps/2 relative).
pub const BN_EPSILON: f64 = 1e-7;

/// Per-channel values saved by a train-mode batch norm forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased (population) variance over batch and space.
    pub batch_var: Vec<f64>,
}

fn check_bn_params<T: Scalar>(input: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(), ShapeError> {
    let c = input.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(ShapeError::new(format!(
            "batchnorm: {c} channels but gamma/beta have {}/{} entries",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Train-mode batch norm using batch statistics over `(N, H, W)`.
pub fn batchnorm_forward_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, BatchNormCache<T>), ShapeError> {
    check_bn_params(input, gamma, beta)?;
    let [n, c, _, _] = input.shape();
    let count = (n * input.plane()) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = (0..n).flat_map(|b| input.channel(b, ch)).map(|v| v.f64()).sum();
        mean[ch] = s / count;
        let ss: f64 = (0..n)
            .flat_map(|b| input.channel(b, ch))
            .map(|v| {
                let d = v.f64() - mean[ch];
                d * d
            })
            .sum();
        var[ch] = ss / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let p = input.plane();
    for b in 0..n {
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            let (gm, bt) = (gamma[ch], beta[ch]);
            let base = (b * c + ch) * p;
            let src = input.channel(b, ch);
            for i in 0..p {
                let xh = T::of((src[i].f64() - m) * is);
                xhat.as_mut_slice()[base + i] = xh;
                out.as_mut_slice()[base + i] = gm * xh + bt;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Inference-mode batch norm with fixed statistics.
pub fn batchnorm_forward_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> Result<Tensor<T>, ShapeError> {
    check_bn_params(input, gamma, beta)?;
    let c = input.channels();
    if mean.len() != c || var.len() != c {
        return Err(ShapeError::new("batchnorm: running statistics have the wrong length"));
    }
    let scale: Vec<T> = (0..c)
        .map(|ch| T::of(gamma[ch].f64() / (var[ch].f64() + BN_EPSILON).sqrt()))
        .collect();
    let shift: Vec<T> = (0..c).map(|ch| beta[ch] - scale[ch] * mean[ch]).collect();
    let mut out = input.clone();
    let p = input.plane();
    for (i, plane) in out.as_mut_slice().chunks_exact_mut(p).enumerate() {
        let ch = i % c;
        for v in plane {
            *v = *v * scale[ch] + shift[ch];
        }
    }
    Ok(out)
}

/// Full batch-norm gradient, including the terms through the batch mean and
/// variance.
pub fn batchnorm_backward<T: Scalar>(
    d_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), ShapeError> {
    if d_out.shape() != cache.xhat.shape() {
        return Err(ShapeError::new(format!(
            "batchnorm backward: gradient {:?} vs activation {:?}",
            d_out.shape(),
            cache.xhat.shape()
        )));
    }
    let [n, c, _, _] = d_out.shape();
    let count = (n * d_out.plane()) as f64;
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    let mut d_in = Tensor::zeros(d_out.shape());
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            for (dy, xh) in d_out.channel(b, ch).iter().zip(cache.xhat.channel(b, ch)) {
                sum_dy += dy.f64();
                sum_dy_xhat += dy.f64() * xh.f64();
            }
        }
        d_gamma[ch] = T::of(sum_dy_xhat);
        d_beta[ch] = T::of(sum_dy);
        let g = gamma[ch].f64();
        let k = g * cache.inv_std[ch] / count;
        let p = d_out.plane();
        for b in 0..n {
            let base = (b * c + ch) * p;
            let dy = d_out.channel(b, ch);
            let xh = cache.xhat.channel(b, ch);
            let dst = &mut d_in.as_mut_slice()[base..base + p];
            for i in 0..p {
                dst[i] = T::of(k * (count * dy[i].f64() - sum_dy - xh[i].f64() * sum_dy_xhat));
            }
        }
    }
    Ok((d_in, d_gamma, d_beta))
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    // NaN passes through so a diverging run is reported rather than masked.
    input.map(|v| if v < T::zero() || v == T::zero() { T::zero() } else { v })
}

/// Uses the forward output: `y > 0` exactly where `x > 0`.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let mut d = d_out.clone();
    for (g, &y) in d.as_mut_slice().iter_mut().zip(output.as_slice()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    d
}

/// 2x2, stride-2 max pooling. Odd trailing rows/columns are dropped
/// (floor semantics). Returns the flat input index of each window's maximum
/// (first maximum in raster order on ties).
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), ShapeError> {
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(ShapeError::new(format!("maxpool2: input {:?} smaller than 2x2", input.shape())));
    }
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = input.as_slice();
    let mut k = 0;
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for &i in &[i0 + 1, i0 + w, i0 + w + 1] {
                    if src[i] > src[best] || src[i].is_nan() {
                        best = i;
                    }
                }
                out.as_mut_slice()[k] = src[best];
                argmax.push(best);
                k += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Scalar>(input_shape: [usize; 4], argmax: &[usize], d_out: &Tensor<T>) -> Tensor<T> {
    let mut d = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(d_out.as_slice()) {
        d.as_mut_slice()[i] += g;
    }
    d
}

/// 2x nearest-neighbour upsampling.
pub fn upsample2_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let dst = out.as_mut_slice();
    for nc in 0..n * c {
        let src = &input.as_slice()[nc * h * w..(nc + 1) * h * w];
        let base = nc * 4 * h * w;
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[base + y * 2 * w + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Sums each 2x2 block of the upstream gradient.
pub fn upsample2_backward<T: Scalar>(d_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = d_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut d = Tensor::zeros([n, c, h, w]);
    for nc in 0..n * c {
        let src = &d_out.as_slice()[nc * h2 * w2..(nc + 1) * h2 * w2];
        let dst = &mut d.as_mut_slice()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    d
}

/// Center-crops `skip` to `deep`'s spatial size and stacks `[deep, skip]`
/// along channels.
pub fn crop_concat_forward<T: Scalar>(deep: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    let [n, cd, h, w] = deep.shape();
    let [ns, cs, hs, ws] = skip.shape();
    if ns != n || hs < h || ws < w {
        return Err(ShapeError::new(format!(
            "crop_concat: skip {:?} cannot be cropped onto deep {:?}",
            skip.shape(),
            deep.shape()
        )));
    }
    let cropped = skip.center_crop(h, w)?;
    let mut data = Vec::with_capacity(n * (cd + cs) * h * w);
    for b in 0..n {
        data.extend_from_slice(deep.item(b));
        data.extend_from_slice(cropped.item(b));
    }
    Tensor::from_vec([n, cd + cs, h, w], data)
}

/// Splits the gradient and zero-pads the skip part back to `skip_shape`.
pub fn crop_concat_backward<T: Scalar>(
    d_out: &Tensor<T>,
    deep_channels: usize,
    skip_shape: [usize; 4],
) -> Result<(Tensor<T>, Tensor<T>), ShapeError> {
    let [n, c, h, w] = d_out.shape();
    let [_, cs, hs, ws] = skip_shape;
    if c != deep_channels + cs || hs < h || ws < w {
        return Err(ShapeError::new("crop_concat backward: inconsistent shapes"));
    }
    let (oy, ox) = ((hs - h) / 2, (ws - w) / 2);
    let mut d_deep = Tensor::zeros([n, deep_channels, h, w]);
    let mut d_skip = Tensor::zeros(skip_shape);
    for b in 0..n {
        let item = d_out.item(b);
        let split = deep_channels * h * w;
        d_deep.item_mut(b).copy_from_slice(&item[..split]);
        let dst = d_skip.item_mut(b);
        for ch in 0..cs {
            for y in 0..h {
                let s = split + (ch * h + y) * w;
                let d = (ch * hs + y + oy) * ws + ox;
                dst[d..d + w].copy_from_slice(&item[s..s + w]);
            }
        }
    }
    Ok((d_deep, d_skip))
}

/// Per-pixel two-class softmax; returns the probability of channel 1.
pub fn softmax2_probability<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    let [n, c, h, w] = logits.shape();
    if c != 2 {
        return Err(ShapeError::new(format!("softmax: expected 2 channels, got {c}")));
    }
    let mut out = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        let (z0, z1) = (logits.channel(b, 0), logits.channel(b, 1));
        for (i, v) in out.item_mut(b).iter_mut().enumerate() {
            // p1 = 1 / (1 + exp(z0 - z1)), evaluated stably.
            let d = z0[i].f64() - z1[i].f64();
            *v = T::of(if d >= 0.0 {
                let e = (-d).exp();
                e / (1.0 + e)
            } else {
                1.0 / (1.0 + d.exp())
            });
        }
    }
    Ok(out)
}

/// Mean pixel-wise cross-entropy of a two-class softmax, and its gradient
/// with respect to the logits. `labels` is `N x 1 x H x W` with 0/1 values;
/// when its spatial size differs from the logits it is center-cropped if
/// `crop_to_logits` is set, otherwise rejected.
pub fn softmax_ce<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
    crop_to_logits: bool,
) -> Result<(f64, Tensor<T>), NnError> {
    let [n, c, h, w] = logits.shape();
    if c != 2 {
        return Err(ShapeError::new(format!("softmax_ce: expected 2 logit channels, got {c}")).into());
    }
    let [ln, lc, lh, lw] = labels.shape();
    if ln != n || lc != 1 {
        return Err(ShapeError::new(format!(
            "softmax_ce: labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        ))
        .into());
    }
    if let Some((index, v)) = labels
        .as_slice()
        .iter()
        .enumerate()
        .find(|(_, v)| **v != T::zero() && **v != T::one())
    {
        return Err(NnError::NonBinaryLabel { index, value: v.f64() });
    }
    let labels = if (lh, lw) == (h, w) {
        labels.clone()
    } else if crop_to_logits {
        labels.center_crop(h, w)?
    } else {
        return Err(ShapeError::new(format!(
            "softmax_ce: labels {lh}x{lw} differ from logits {h}x{w} and cropping is off"
        ))
        .into());
    };
    let count = (n * h * w) as f64;
    let mut loss = 0.0;
    let mut d = Tensor::zeros(logits.shape());
    for b in 0..n {
        let lab = labels.channel(b, 0);
        let (z0, z1) = (logits.channel(b, 0), logits.channel(b, 1));
        let base = b * 2 * h * w;
        let p = h * w;
        for i in 0..p {
            let (a, bb) = (z0[i].f64(), z1[i].f64());
            let m = a.max(bb);
            let lse = m + ((a - m).exp() + (bb - m).exp()).ln();
            let target = lab[i] == T::one();
            loss += lse - if target { bb } else { a };
            let p1 = (bb - lse).exp();
            let p0 = (a - lse).exp();
            let (t0, t1) = if target { (0.0, 1.0) } else { (1.0, 0.0) };
            d.as_mut_slice()[base + i] = T::of((p0 - t0) / count);
            d.as_mut_slice()[base + p + i] = T::of((p1 - t1) / count);
        }
    }
    Ok((loss / count, d))
}
