//! Forward and backward kernels on plain tensors. Layout is NCHW throughout.

use rayon::prelude::*;

use super::scalar::gemm;
use super::{NnError, Scalar, Tensor};

/// Stabilizer added to the variance in normalization layers.
pub const NORM_EPS: f64 = 1e-5;

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

/// Offsets `(dy, dx)` of the nine taps, tap index `ky * 3 + kx`.
#[inline]
fn tap_offset(s: usize) -> (isize, isize) {
    ((s / 3) as isize - 1, (s % 3) as isize - 1)
}

/// Rows/columns `i` in `[0, len)` for which `i + d` is also in `[0, len)`.
#[inline]
fn valid_range(len: usize, d: isize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    lo..hi.max(lo)
}

/// `r` translated by `d`.
fn shifted(r: &std::ops::Range<usize>, d: isize) -> std::ops::Range<usize> {
    (r.start as isize + d) as usize..(r.end as isize + d) as usize
}

/// `[O, C, 3, 3]` kernel rearranged to `[9 * O, C]`, tap-major.
fn pack_kernel<T: Scalar>(kernel: &[T], out_ch: usize, in_ch: usize) -> Vec<T> {
    let mut packed = vec![T::zero(); 9 * out_ch * in_ch];
    for o in 0..out_ch {
        for c in 0..in_ch {
            for s in 0..9 {
                packed[(s * out_ch + o) * in_ch + c] = kernel[(o * in_ch + c) * 9 + s];
            }
        }
    }
    packed
}

fn check_conv<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize), NnError> {
    let (n, c, h, w) = x.dims4()?;
    let (o, kc, kh, kw) = kernel.dims4()?;
    if kc != c || kh != 3 || kw != 3 {
        return Err(shape_err(format!(
            "kernel {:?} does not match input channels {c}",
            kernel.shape()
        )));
    }
    Ok((n, c, h, w, o))
}

/// 3×3 cross-correlation, stride 1, zero padding of one pixel.
///
/// Computed as a single `[9O, C] × [C, HW]` product per image followed by a
/// shifted accumulation of the nine tap planes.
pub fn conv3x3_forward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, c, h, w, o) = check_conv(x, kernel)?;
    let hw = h * w;
    let packed = pack_kernel(kernel.data(), o, c);
    let mut out = Tensor::zeros(&[n, o, h, w]);
    out.data_mut()
        .par_chunks_mut(o * hw)
        .zip(x.data().par_chunks(c * hw))
        .for_each(|(out_n, x_n)| {
            let mut taps = vec![T::zero(); 9 * o * hw];
            gemm(9 * o, c, hw, &packed, false, x_n, false, T::zero(), &mut taps);
            for s in 0..9 {
                let (dy, dx) = tap_offset(s);
                let rows = valid_range(h, dy);
                let cols = valid_range(w, dx);
                for oc in 0..o {
                    let plane = &taps[(s * o + oc) * hw..(s * o + oc + 1) * hw];
                    let dst = &mut out_n[oc * hw..(oc + 1) * hw];
                    let src_cols = shifted(&cols, dx);
                    for y in rows.clone() {
                        let sy = (y as isize + dy) as usize;
                        let src_row = &plane[sy * w..(sy + 1) * w][src_cols.clone()];
                        let dst_row = &mut dst[y * w..(y + 1) * w][cols.clone()];
                        for (d, &v) in dst_row.iter_mut().zip(src_row) {
                            *d = *d + v;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv3x3_forward`] with respect to its input (optional) and
/// kernel.
pub fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>), NnError> {
    let (n, c, h, w, o) = check_conv(x, kernel)?;
    if grad_out.shape() != [n, o, h, w] {
        return Err(shape_err(format!(
            "conv gradient {:?} does not match output [{n}, {o}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let hw = h * w;
    let packed = pack_kernel(kernel.data(), o, c);

    // G[s, o, p] = grad_out[o, p - offset(s)], zero outside the image.
    let shifted_grads = |g_n: &[T]| {
        let mut g = vec![T::zero(); 9 * o * hw];
        for s in 0..9 {
            let (dy, dx) = tap_offset(s);
            let rows = valid_range(h, -dy);
            let cols = valid_range(w, -dx);
            for oc in 0..o {
                let src = &g_n[oc * hw..(oc + 1) * hw];
                let dst = &mut g[(s * o + oc) * hw..(s * o + oc + 1) * hw];
                let src_cols = shifted(&cols, -dx);
                for y in rows.clone() {
                    let sy = (y as isize - dy) as usize;
                    dst[y * w..(y + 1) * w][cols.clone()]
                        .copy_from_slice(&src[sy * w..(sy + 1) * w][src_cols.clone()]);
                }
            }
        }
        g
    };
    let kernel_grad_of = |g: &[T], x_n: &[T]| {
        let mut gk = vec![T::zero(); 9 * o * c];
        gemm(9 * o, hw, c, g, false, x_n, true, T::zero(), &mut gk);
        gk
    };

    let (grad_input, partials): (Option<Tensor<T>>, Vec<Vec<T>>) = if need_input_grad {
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        let partials = gx
            .data_mut()
            .par_chunks_mut(c * hw)
            .zip(x.data().par_chunks(c * hw))
            .zip(grad_out.data().par_chunks(o * hw))
            .map(|((gx_n, x_n), g_n)| {
                let g = shifted_grads(g_n);
                gemm(c, 9 * o, hw, &packed, true, &g, false, T::zero(), gx_n);
                kernel_grad_of(&g, x_n)
            })
            .collect();
        (Some(gx), partials)
    } else {
        let partials = x
            .data()
            .par_chunks(c * hw)
            .zip(grad_out.data().par_chunks(o * hw))
            .map(|(x_n, g_n)| kernel_grad_of(&shifted_grads(g_n), x_n))
            .collect();
        (None, partials)
    };

    // fixed-order reduction keeps results independent of scheduling
    let mut packed_grad = vec![T::zero(); 9 * o * c];
    for part in &partials {
        for (a, &b) in packed_grad.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    let mut gk = Tensor::zeros(kernel.shape());
    let gkd = gk.data_mut();
    for oc in 0..o {
        for ic in 0..c {
            for s in 0..9 {
                gkd[(oc * c + ic) * 9 + s] = packed_grad[(s * o + oc) * c + ic];
            }
        }
    }
    Ok((grad_input, gk))
}

/// Cached quantities of a batch-statistics normalization.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel batch statistics `(mean, biased variance)` over `N, H, W`.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let plane = |b: usize, ch: usize| &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let m = (0..n).map(|b| chunked_sum(plane(b, ch), |v| v)).sum::<f64>() / count;
        let mt = T::lit(m);
        let ss: f64 = (0..n)
            .map(|b| {
                chunked_sum(plane(b, ch), |v| {
                    let d = v - mt;
                    d * d
                })
            })
            .sum();
        mean[ch] = m;
        var[ch] = ss / count;
    }
    Ok((mean, var))
}

/// Sum of `f` over `xs`: short runs accumulate in `T` (vectorizable), run
/// totals accumulate in `f64`.
#[inline]
fn chunked_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> f64 {
    xs.chunks(64)
        .map(|run| {
            run.iter()
                .fold(T::zero(), |acc, &v| acc + f(v))
                .to_f64()
                .unwrap_or(f64::NAN)
        })
        .sum()
}

fn check_affine<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<(), NnError> {
    let (_, c, _, _) = x.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(shape_err(format!(
            "normalization parameters of length {}/{} for {c} channels",
            scale.len(),
            shift.len()
        )));
    }
    Ok(())
}

/// Training-mode normalization with batch statistics. Returns the output, the
/// batch mean and biased variance, and the cache for the backward pass.
#[allow(clippy::type_complexity)]
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>, NormCache<T>), NnError> {
    check_affine(x, scale, shift)?;
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let (mean, var) = channel_stats(x)?;
    let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + NORM_EPS).sqrt())).collect();
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (i, xp) in x.data().chunks_exact(hw).enumerate() {
        let ch = i % c;
        let m = T::lit(mean[ch]);
        let (g, beta, is) = (scale.data()[ch], shift.data()[ch], inv_std[ch]);
        normalized.extend(xp.iter().map(|&v| (v - m) * is));
        out.extend(normalized[i * hw..].iter().map(|&xh| g * xh + beta));
    }
    debug_assert_eq!(out.len(), n * c * hw);
    Ok((
        Tensor::new(x.shape(), out)?,
        mean,
        var,
        NormCache { normalized, inv_std },
    ))
}

/// Returns `(grad_input, grad_scale, grad_shift)`.
pub fn batch_norm_train_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    scale: &Tensor<T>,
    cache: &NormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnError> {
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut g_scale = vec![0.0f64; c];
    let mut g_shift = vec![0.0f64; c];
    for (i, (gp, np)) in grad_out
        .data()
        .chunks_exact(hw)
        .zip(cache.normalized.chunks_exact(hw))
        .enumerate()
    {
        let ch = i % c;
        g_shift[ch] += chunked_sum(gp, |v| v);
        g_scale[ch] += gp
            .chunks(64)
            .zip(np.chunks(64))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .fold(T::zero(), |acc, (&g, &xh)| acc + g * xh)
                    .to_f64()
                    .unwrap_or(f64::NAN)
            })
            .sum::<f64>();
    }
    let mut gx = Vec::with_capacity(grad_out.len());
    let mt = T::lit(m);
    for (i, (gp, np)) in grad_out
        .data()
        .chunks_exact(hw)
        .zip(cache.normalized.chunks_exact(hw))
        .enumerate()
    {
        let ch = i % c;
        let k = scale.data()[ch] * cache.inv_std[ch] / mt;
        let sb = T::lit(g_shift[ch]);
        let sg = T::lit(g_scale[ch]);
        gx.extend(gp.iter().zip(np).map(|(&g, &xh)| k * (mt * g - sb - xh * sg)));
    }
    let to_t = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(T::lit).collect());
    Ok((Tensor::new(grad_out.shape(), gx)?, to_t(g_scale)?, to_t(g_shift)?))
}

/// Normalization with fixed statistics: a per-channel affine map.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    mean: &[T],
    var: &[T],
) -> Result<Tensor<T>, NnError> {
    check_affine(x, scale, shift)?;
    let (n, c, h, w) = x.dims4()?;
    if mean.len() != c || var.len() != c {
        return Err(shape_err(format!("running statistics do not cover {c} channels")));
    }
    let hw = h * w;
    let affine: Vec<(T, T)> = (0..c)
        .map(|ch| {
            let is = T::one() / (var[ch] + T::lit(NORM_EPS)).sqrt();
            let a = scale.data()[ch] * is;
            (a, shift.data()[ch] - a * mean[ch])
        })
        .collect();
    let mut out = Vec::with_capacity(n * c * hw);
    for (i, xp) in x.data().chunks_exact(hw).enumerate() {
        let (a, off) = affine[i % c];
        out.extend(xp.iter().map(|&v| a * v + off));
    }
    Tensor::new(x.shape(), out)
}

pub fn batch_norm_eval_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    scale: &Tensor<T>,
    mean: &[T],
    var: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnError> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut g_scale = Tensor::zeros(&[c]);
    let mut g_shift = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let is = T::one() / (var[ch] + T::lit(NORM_EPS)).sqrt();
            let a = scale.data()[ch] * is;
            let (mut gs, mut gb) = (T::zero(), T::zero());
            for i in base..base + hw {
                let g = grad_out.data()[i];
                gx.data_mut()[i] = g * a;
                gb = gb + g;
                gs = gs + g * (x.data()[i] - mean[ch]) * is;
            }
            g_scale.data_mut()[ch] = g_scale.data()[ch] + gs;
            g_shift.data_mut()[ch] = g_shift.data()[ch] + gb;
        }
    }
    Ok((gx, g_scale, g_shift))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("average pooling needs even sides, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let quarter = T::lit(0.25);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>, NnError> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    let (h, w) = (oh * 2, ow * 2);
    if input_shape != [n, c, h, w] {
        return Err(shape_err("pooling gradient shape mismatch".into()));
    }
    let mut gx = Tensor::zeros(input_shape);
    let quarter = T::lit(0.25);
    for p in 0..n * c {
        let src = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = src[y * ow + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    Ok(gx)
}

/// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::lit(1.0 / hw as f64);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>, NnError> {
    let (n, c) = grad_out.dims2()?;
    let [_, _, h, w] = *input_shape else {
        return Err(shape_err("pooling input must be rank 4".into()));
    };
    let hw = h * w;
    let inv = T::lit(1.0 / hw as f64);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for (plane, &g) in gx.data_mut().chunks_exact_mut(hw).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    Ok(gx)
}

/// Concatenation along the channel axis.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, NnError> {
    let first = inputs
        .first()
        .ok_or_else(|| shape_err("concatenation of zero tensors".into()))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(shape_err(format!(
                "cannot concatenate {:?} with {:?}",
                first.shape(),
                t.shape()
            )));
        }
        total += tc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for t in inputs {
            let tc = t.shape()[1];
            data.extend_from_slice(&t.data()[b * tc * hw..(b + 1) * tc * hw]);
        }
    }
    Tensor::new(&[n, total, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>, NnError> {
    let (n, c, h, w) = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(shape_err("channel split does not cover tensor".into()));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&k| Vec::with_capacity(n * k * hw)).collect();
    for b in 0..n {
        let mut offset = b * c * hw;
        for (part, &k) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad.data()[offset..offset + k * hw]);
            offset += k * hw;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &k)| Tensor::new(&[n, k, h, w], d))
        .collect()
}

/// `y = x W^T + b` with `x: [N, F]`, `W: [O, F]`, `b: [O]`.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (n, f) = x.dims2()?;
    let (o, wf) = weight.dims2()?;
    if wf != f || bias.len() != o {
        return Err(shape_err(format!(
            "linear layer {:?}/{:?} applied to {:?}",
            weight.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    let mut data = Vec::with_capacity(n * o);
    for _ in 0..n {
        data.extend_from_slice(bias.data());
    }
    gemm(n, f, o, x.data(), false, weight.data(), true, T::one(), &mut data);
    Tensor::new(&[n, o], data)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), NnError> {
    let (n, f) = x.dims2()?;
    let (o, _) = weight.dims2()?;
    if grad_out.shape() != [n, o] {
        return Err(shape_err("linear gradient shape mismatch".into()));
    }
    let mut gx = Tensor::zeros(&[n, f]);
    gemm(n, o, f, grad_out.data(), false, weight.data(), false, T::zero(), gx.data_mut());
    let mut gw = Tensor::zeros(&[o, f]);
    gemm(o, n, f, grad_out.data(), true, x.data(), false, T::zero(), gw.data_mut());
    let mut gb = Tensor::zeros(&[o]);
    for row in grad_out.data().chunks_exact(o) {
        for (a, &g) in gb.data_mut().iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    Ok((gx, gw, gb))
}

/// `log(cosh(t))` evaluated as `|t| + log1p(exp(-2|t|)) - log 2`.
pub fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(usize, usize), NnError> {
    let dims = pred.dims2()?;
    if pred.shape() != target.shape() {
        return Err(shape_err(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(dims)
}

/// Mean over the batch of the per-sample mean log-cosh error.
pub fn log_cosh_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64, NnError> {
    check_pair(pred, target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| log_cosh((t - p).to_f64().unwrap_or(0.0)))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Gradient of [`log_cosh_loss`] with respect to `pred`: `tanh(p - t) / (N Nc)`.
pub fn log_cosh_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    check_pair(pred, target)?;
    let inv = T::lit(1.0 / pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).tanh() * inv)
        .collect();
    Tensor::new(pred.shape(), data)
}

/// Mean over the batch of the per-sample mean squared error.
pub fn l2_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64, NnError> {
    check_pair(pred, target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (t - p).to_f64().unwrap_or(0.0);
            d * d
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn l2_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    check_pair(pred, target)?;
    let k = T::lit(2.0 / pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * k)
        .collect();
    Tensor::new(pred.shape(), data)
}
