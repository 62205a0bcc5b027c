//! Forward and backward kernels over single `[C, H, W]` samples.
//!
//! Every kernel is a pure function of its inputs and runs sequentially, so
//! results are bitwise reproducible regardless of how callers parallelize
//! across samples.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// `c = a' * b' + beta * c` where `'` is an optional transpose.
///
/// `a` is `m x k` after transposition, `b` is `k x n`, `c` is `m x n`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_dims(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = input.chw()?;
    let (c_out, wc_in, kh, kw) = match weight.dims()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape(op, format!("weight must be 4-D, got {:?}", weight.dims()))),
    };
    if wc_in != c_in {
        return Err(Error::shape(
            op,
            format!("input has {c_in} channels but weight {:?} expects {wc_in}", weight.dims()),
        ));
    }
    if kh != kw {
        return Err(Error::shape(op, format!("non-square kernel {kh}x{kw}")));
    }
    let k = kh;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(
            op,
            format!("kernel {k} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    let ho = h + 2 * padding - k + 1;
    let wo = w + 2 * padding - k + 1;
    Ok((c_in, h, w, c_out, k, ho, wo))
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let n = ho * wo;
    let mut cols = vec![0.0f32; c_in * k * k * n];
    for ci in 0..c_in {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                let y0 = pad.saturating_sub(ky);
                let y1 = ho.min(h + pad - ky);
                let x0 = pad.saturating_sub(kx);
                let x1 = wo.min(w + pad - kx);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let iy = y + ky - pad;
                    let src = &plane[iy * w + x0 + kx - pad..][..x1 - x0];
                    row[y * wo + x0..y * wo + x1].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let n = ho * wo;
    let mut out = vec![0.0f32; c_in * h * w];
    for ci in 0..c_in {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                let y0 = pad.saturating_sub(ky);
                let y1 = ho.min(h + pad - ky);
                let x0 = pad.saturating_sub(kx);
                let x1 = wo.min(w + pad - kx);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let iy = y + ky - pad;
                    let dst = &mut plane[iy * w + x0 + kx - pad..][..x1 - x0];
                    for (d, s) in dst.iter_mut().zip(&row[y * wo + x0..y * wo + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, k, k]` weights.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let (c_in, h, w, c_out, k, ho, wo) = conv_dims("conv2d", input, weight, padding)?;
    if bias.len() != c_out {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries for {c_out} output channels", bias.len()),
        ));
    }
    let n = ho * wo;
    let mut out = vec![0.0f32; c_out * n];
    for (co, &b) in bias.data().iter().enumerate() {
        out[co * n..(co + 1) * n].fill(b);
    }
    let cols = im2col(input.data(), c_in, h, w, k, padding, ho, wo);
    gemm(c_out, c_in * k * k, n, weight.data(), false, &cols, false, 1.0, &mut out);
    Tensor::new(vec![c_out, ho, wo], out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w, c_out, k, ho, wo) = conv_dims("conv2d_backward", input, weight, padding)?;
    if grad_out.dims() != [c_out, ho, wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?}, expected {:?}", grad_out.dims(), [c_out, ho, wo]),
        ));
    }
    let n = ho * wo;
    let kk = c_in * k * k;
    let g = grad_out.data();

    let grad_bias: Vec<f32> = g.chunks_exact(n).map(|p| p.iter().sum()).collect();

    let cols = im2col(input.data(), c_in, h, w, k, padding, ho, wo);
    let mut grad_weight = vec![0.0f32; c_out * kk];
    gemm(c_out, n, kk, g, false, &cols, true, 0.0, &mut grad_weight);

    let mut grad_cols = vec![0.0f32; kk * n];
    gemm(kk, c_out, n, weight.data(), true, g, false, 0.0, &mut grad_cols);
    let grad_input = col2im(&grad_cols, c_in, h, w, k, padding, ho, wo);

    Ok((
        Tensor::new(vec![c_in, h, w], grad_input)?,
        Tensor::new(weight.dims().to_vec(), grad_weight)?,
        Tensor::new(vec![c_out], grad_bias)?,
    ))
}

/// Output length of a pooling window sweep.
pub fn pooled_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (k >= 1 && stride >= 1 && padded >= k).then(|| (padded - k) / stride + 1)
}

/// Window mean with count-include-pad semantics: padded zeros count toward `k * k`.
pub fn avg_pool2d(input: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("avg_pool2d", format!("k={k}, stride={stride}")));
    }
    let (ho, wo) = match (pooled_len(h, k, stride, padding), pooled_len(w, k, stride, padding)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "avg_pool2d",
                format!("window {k} larger than padded input {:?} (pad {padding})", input.dims()),
            ))
        }
    };
    let norm = 1.0 / (k * k) as f32;
    let src = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            let y_start = (oy * stride) as isize - padding as isize;
            let ys = y_start.max(0) as usize..((y_start + k as isize).min(h as isize)) as usize;
            for ox in 0..wo {
                let x_start = (ox * stride) as isize - padding as isize;
                let xs = x_start.max(0) as usize..((x_start + k as isize).min(w as isize)) as usize;
                let mut acc = 0.0f32;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += plane[y * w + x];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

fn adaptive_bounds(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

/// Adaptive average pooling to `(out_h, out_w)`; window `i` spans
/// `[floor(i * H / out_h), ceil((i + 1) * H / out_h))`.
pub fn adaptive_avg_pool2d(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::shape(
            "adaptive_avg_pool2d",
            format!("cannot pool {:?} to {out_h}x{out_w}", input.dims()),
        ));
    }
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bounds(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bounds(ox, w, out_w);
                let mut acc = 0.0f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += plane[y * w + x];
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f32);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn adaptive_avg_pool2d_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = grad_out.chw()?;
    if out_h > in_h || out_w > in_w {
        return Err(Error::shape("adaptive_avg_pool2d_backward", "output larger than input"));
    }
    let g = grad_out.data();
    let mut out = vec![0.0f32; c * in_h * in_w];
    for ci in 0..c {
        let plane = &mut out[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bounds(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bounds(ox, in_w, out_w);
                let v = g[(ci * out_h + oy) * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        plane[y * in_w + x] += v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], out)
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

/// Half-pixel-centre source taps for resizing `src` samples to `dst`.
fn linear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|i| {
            let pos = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap { lo, hi, frac: pos - lo as f32 }
        })
        .collect()
}

/// Bilinear resize with the align-corners=false convention.
pub fn bilinear_upsample(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h < h || out_w < w {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("target {out_h}x{out_w} smaller than source {h}x{w}"),
        ));
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for y in &ty {
            let r0 = &plane[y.lo * w..(y.lo + 1) * w];
            let r1 = &plane[y.hi * w..(y.hi + 1) * w];
            for x in &tx {
                let top = r0[x.lo] + (r0[x.hi] - r0[x.lo]) * x.frac;
                let bot = r1[x.lo] + (r1[x.hi] - r1[x.lo]) * x.frac;
                out.push(top + (bot - top) * y.frac);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn bilinear_upsample_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = grad_out.chw()?;
    if out_h < in_h || out_w < in_w {
        return Err(Error::shape("bilinear_upsample_backward", "output smaller than input"));
    }
    let ty = linear_taps(in_h, out_h);
    let tx = linear_taps(in_w, out_w);
    let g = grad_out.data();
    let mut out = vec![0.0f32; c * in_h * in_w];
    for ci in 0..c {
        let plane = &mut out[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, x) in tx.iter().enumerate() {
                let v = g[(ci * out_h + oy) * out_w + ox];
                let (wy0, wy1) = (1.0 - y.frac, y.frac);
                let (wx0, wx1) = (1.0 - x.frac, x.frac);
                plane[y.lo * in_w + x.lo] += v * wy0 * wx0;
                plane[y.lo * in_w + x.hi] += v * wy0 * wx1;
                plane[y.hi * in_w + x.lo] += v * wy1 * wx0;
                plane[y.hi * in_w + x.hi] += v * wy1 * wx1;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], out)
}

/// Intermediates kept by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

/// Normalizes the channel vector at every spatial position, then applies
/// per-channel gain and bias.
pub fn layer_norm(input: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let (c, h, w) = input.chw()?;
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("{c} channels but gain {:?} / bias {:?}", gain.dims(), bias.dims()),
        ));
    }
    let n = h * w;
    let x = input.data();
    let mut mean = vec![0.0f32; n];
    for plane in x.chunks_exact(n) {
        for (m, v) in mean.iter_mut().zip(plane) {
            *m += v;
        }
    }
    let inv_c = 1.0 / c as f32;
    mean.iter_mut().for_each(|m| *m *= inv_c);
    let mut var = vec![0.0f32; n];
    for plane in x.chunks_exact(n) {
        for ((s, v), m) in var.iter_mut().zip(plane).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|v| 1.0 / (v * inv_c + LAYER_NORM_EPS).sqrt())
        .collect();

    let mut normalized = vec![0.0f32; c * n];
    let mut out = vec![0.0f32; c * n];
    for ci in 0..c {
        let (g, b) = (gain.data()[ci], bias.data()[ci]);
        let src = &x[ci * n..(ci + 1) * n];
        let nrm = &mut normalized[ci * n..(ci + 1) * n];
        let dst = &mut out[ci * n..(ci + 1) * n];
        for p in 0..n {
            let xh = (src[p] - mean[p]) * inv_std[p];
            nrm[p] = xh;
            dst[p] = xh * g + b;
        }
    }
    let dims = input.dims().to_vec();
    Ok((
        Tensor::new(dims.clone(), out)?,
        LayerNormCache { normalized: Tensor::new(dims, normalized)?, inv_std },
    ))
}

/// Returns `(grad_input, grad_gain, grad_bias)`.
pub fn layer_norm_backward(
    grad_out: &Tensor,
    cache: &LayerNormCache,
    gain: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.dims() != cache.normalized.dims() {
        return Err(Error::shape(
            "layer_norm_backward",
            format!("grad {:?} vs cache {:?}", grad_out.dims(), cache.normalized.dims()),
        ));
    }
    let (c, h, w) = grad_out.chw()?;
    let n = h * w;
    let dy = grad_out.data();
    let xh = cache.normalized.data();

    let mut grad_gain = vec![0.0f32; c];
    let mut grad_bias = vec![0.0f32; c];
    let mut mean_g = vec![0.0f32; n];
    let mut mean_gx = vec![0.0f32; n];
    for ci in 0..c {
        let g = gain.data()[ci];
        let dyc = &dy[ci * n..(ci + 1) * n];
        let xhc = &xh[ci * n..(ci + 1) * n];
        let (mut sg, mut sb) = (0.0f32, 0.0f32);
        for p in 0..n {
            sg += dyc[p] * xhc[p];
            sb += dyc[p];
            let gp = dyc[p] * g;
            mean_g[p] += gp;
            mean_gx[p] += gp * xhc[p];
        }
        grad_gain[ci] = sg;
        grad_bias[ci] = sb;
    }
    let inv_c = 1.0 / c as f32;
    let mut grad_in = vec![0.0f32; c * n];
    for ci in 0..c {
        let g = gain.data()[ci];
        for p in 0..n {
            let i = ci * n + p;
            let gp = dy[i] * g;
            grad_in[i] = cache.inv_std[p] * (gp - mean_g[p] * inv_c - xh[i] * mean_gx[p] * inv_c);
        }
    }
    Ok((
        Tensor::new(grad_out.dims().to_vec(), grad_in)?,
        Tensor::new(vec![c], grad_gain)?,
        Tensor::new(vec![c], grad_bias)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes gradient where the forward input was positive.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.dims() != input.dims() {
        return Err(Error::shape("relu_backward", format!("{:?} vs {:?}", grad_out.dims(), input.dims())));
    }
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

/// Fixed sinusoidal 2-D positional encoding.
///
/// Channels `[0, C/2)` encode the row index and `[C/2, C)` the column index.
/// Within each half, channel `2j` holds `sin(pos * f_j)` and `2j + 1` holds
/// `cos(pos * f_j)` with `f_j = 10000^(-2j / (C/2))`.
pub fn pos_encoding_2d(channels: usize, h: usize, w: usize) -> Result<Tensor> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::invalid(
            "pos_encoding_2d",
            format!("channels must be a positive multiple of 4, got {channels}"),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("pos_encoding_2d", "empty spatial extent"));
    }
    let half = channels / 2;
    let mut out = Tensor::zeros(&[channels, h, w]);
    let data = out.data_mut();
    for j in 0..half / 2 {
        let freq = (-(2.0 * j as f64) / half as f64 * 10000f64.ln()).exp();
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = (y as f64 * freq, x as f64 * freq);
                let at = |ch: usize| (ch * h + y) * w + x;
                data[at(2 * j)] = ry.sin() as f32;
                data[at(2 * j + 1)] = ry.cos() as f32;
                data[at(half + 2 * j)] = rx.sin() as f32;
                data[at(half + 2 * j + 1)] = rx.cos() as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar() {
        let out = conv2d(&t(&[1, 1, 1], &[2.0]), &t(&[1, 1, 1, 1], &[3.0]), &t(&[1], &[1.0]), 0).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let input = Tensor::from_fn(&[1, 5, 4], |i| (i as f32 * 0.37).sin());
        let out = conv2d(&input, &t(&[1, 1, 3, 3], &k), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_shape_errors_name_dims() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let weight = Tensor::zeros(&[3, 5, 3, 3]);
        let err = conv2d(&input, &weight, &Tensor::zeros(&[3]), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains("[3, 5, 3, 3]"), "{msg}");
        assert!(conv2d(&Tensor::zeros(&[5, 4, 4]), &weight, &Tensor::zeros(&[2]), 1).is_err());
    }

    #[test]
    fn conv_backward_zero_and_scalar() {
        let input = Tensor::from_fn(&[2, 3, 3], |i| i as f32);
        let weight = Tensor::from_fn(&[2, 2, 3, 3], |i| i as f32 * 0.1);
        let (gi, gw, gb) = conv2d_backward(&Tensor::zeros(&[2, 3, 3]), &input, &weight, 1).unwrap();
        assert!(gi.data().iter().chain(gw.data()).chain(gb.data()).all(|&v| v == 0.0));

        let (gi, gw, gb) =
            conv2d_backward(&t(&[1, 1, 1], &[1.0]), &t(&[1, 1, 1], &[2.0]), &t(&[1, 1, 1, 1], &[3.0]), 0)
                .unwrap();
        assert_eq!((gi.data()[0], gw.data()[0], gb.data()[0]), (3.0, 2.0, 1.0));
    }

    #[test]
    fn avg_pool_examples() {
        let out = avg_pool2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2, 0).unwrap();
        assert_eq!(out.data(), &[2.5]);

        let c = 1.8f32;
        let out = avg_pool2d(&Tensor::full(&[1, 8, 8], c), 3, 2, 1).unwrap();
        assert_eq!(out.dims(), &[1, 4, 4]);
        let d = out.data();
        assert!((d[0] - 4.0 * c / 9.0).abs() < 1e-6);
        assert!((d[5] - c).abs() < 1e-6);
        // Bottom/right windows end inside the input, so only the top/left border loses mass.
        assert!((d[15] - c).abs() < 1e-6);
        assert!((d[1] - 6.0 * c / 9.0).abs() < 1e-6);

        assert!(avg_pool2d(&Tensor::zeros(&[1, 2, 2]), 5, 1, 0).is_err());
        assert!(avg_pool2d(&Tensor::zeros(&[1, 2, 2]), 0, 1, 0).is_err());
    }

    #[test]
    fn layer_norm_two_point() {
        let (out, _) = layer_norm(&t(&[2, 1, 1], &[1.0, 3.0]), &t(&[2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-4);
        assert!((out.data()[1] - 1.0).abs() < 1e-4);

        let (out, _) = layer_norm(&Tensor::full(&[4, 2, 2], 3.0), &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_and_backward() {
        let x = t(&[4], &[-1.0, 0.0, 2.0, -0.5]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = relu_backward(&Tensor::full(&[4], 1.0), &x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn bilinear_constant_and_single_pixel() {
        let out = bilinear_upsample(&Tensor::full(&[2, 3, 5], 0.7), 9, 11).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let out = bilinear_upsample(&t(&[1, 1, 1], &[4.25]), 6, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 4.25));
        assert!(bilinear_upsample(&Tensor::zeros(&[1, 4, 4]), 2, 4).is_err());
    }

    #[test]
    fn bilinear_2x2_to_4x4_by_hand() {
        // Source coordinates for 2 -> 4: (i + 0.5) / 2 - 0.5 = -0.25 (clamped 0), 0.25, 0.75, 1.25
        // giving interpolation weights 0, 0.25, 0.75, 1 (hi index clamps at 1).
        let out = bilinear_upsample(&t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]), 4, 4).unwrap();
        let w = [0.0f32, 0.25, 0.75, 1.0];
        for (y, wy) in w.iter().enumerate() {
            for (x, wx) in w.iter().enumerate() {
                let expected = wx * 1.0 + wy * 2.0;
                assert!((out.data()[y * 4 + x] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pos_encoding_origin_and_determinism() {
        let pe = pos_encoding_2d(8, 3, 3).unwrap();
        for ch in 0..8 {
            let v = pe.data()[ch * 9];
            assert_eq!(v, if ch % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert_eq!(pe, pos_encoding_2d(8, 3, 3).unwrap());
        assert!(pos_encoding_2d(6, 3, 3).is_err());
    }

    #[test]
    fn adaptive_pool_divisible_matches_avg_pool() {
        let x = Tensor::from_fn(&[3, 8, 8], |i| ((i * 7919) % 13) as f32);
        let a = adaptive_avg_pool2d(&x, 2, 2).unwrap();
        let b = avg_pool2d(&x, 4, 4, 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}
