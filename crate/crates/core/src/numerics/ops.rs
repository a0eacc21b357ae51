//! Forward and backward kernels on plain tensors.
//!
//! Everything here is a pure function of its arguments. Reductions run in
//! row-major order so repeated calls are bit-identical.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {input:?} is not (c,h,w)"),
                ))
            }
        };
        let (c_out, wc, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight {weight:?} is not 4-D"),
                ))
            }
        };
        if wc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {wc} input channels, input has {c_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let extent = |n: usize, k: usize| -> Result<usize> {
            let span = (n + 2 * pad).checked_sub(k).ok_or_else(|| {
                Error::shape(
                    "conv2d",
                    format!("kernel {k} exceeds padded extent {}", n + 2 * pad),
                )
            })?;
            if span % stride != 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-integer output extent ({n} + 2*{pad} - {k}) / {stride}"),
                ));
            }
            Ok(span / stride + 1)
        };
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: extent(h, kh)?,
            wo: extent(w, kw)?,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.out_len();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Zero-padded 2-D cross-correlation of a `(c_in, h, w)` input with a
/// `(c_out, c_in, kh, kw)` weight.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} outputs", b.shape(), g.c_out),
            ));
        }
    }
    let p = g.out_len();
    let mut out = vec![T::zero(); g.c_out * p];
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_mut(p).zip(b.data()) {
            o.fill(bv);
        }
    }
    let accumulate = bias.is_some();
    if g.is_pointwise() {
        T::gemm(
            g.c_out,
            g.c_in,
            p,
            weight.data(),
            false,
            x.data(),
            false,
            &mut out,
            accumulate,
        );
    } else {
        let cols = im2col(x.data(), &g);
        T::gemm(
            g.c_out,
            g.patch_len(),
            p,
            weight.data(),
            false,
            &cols,
            false,
            &mut out,
            accumulate,
        );
    }
    Tensor::new(vec![g.c_out, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`. `d_input` is only
/// computed when `need_input` is set.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    if grad_out.shape() != [g.c_out, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {:?}", grad_out.shape()),
        ));
    }
    let p = g.out_len();
    let k = g.patch_len();
    let d_bias: Vec<T> = grad_out
        .data()
        .chunks(p)
        .map(|r| r.iter().copied().sum())
        .collect();
    let mut d_weight = vec![T::zero(); g.c_out * k];
    let d_input = if g.is_pointwise() {
        T::gemm(
            g.c_out,
            p,
            g.c_in,
            grad_out.data(),
            false,
            x.data(),
            true,
            &mut d_weight,
            false,
        );
        need_input.then(|| {
            let mut dx = vec![T::zero(); g.c_in * p];
            T::gemm(
                g.c_in,
                g.c_out,
                p,
                weight.data(),
                true,
                grad_out.data(),
                false,
                &mut dx,
                false,
            );
            dx
        })
    } else {
        let cols = im2col(x.data(), &g);
        T::gemm(
            g.c_out,
            p,
            k,
            grad_out.data(),
            false,
            &cols,
            true,
            &mut d_weight,
            false,
        );
        need_input.then(|| {
            let mut dcols = vec![T::zero(); k * p];
            T::gemm(
                k,
                g.c_out,
                p,
                weight.data(),
                true,
                grad_out.data(),
                false,
                &mut dcols,
                false,
            );
            col2im(&dcols, &g)
        })
    };
    Ok((
        d_input
            .map(|d| Tensor::new(x.shape().to_vec(), d))
            .transpose()?,
        Tensor::new(weight.shape().to_vec(), d_weight)?,
        Tensor::new(vec![g.c_out], d_bias)?,
    ))
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

pub fn silu_grad<T: Real>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Per-group statistics saved by [`group_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn check_group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            "gamma/beta must have one entry per channel",
        ));
    }
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(
            "group_norm eps must be positive".into(),
        ));
    }
    Ok((c, h, w))
}

/// Group normalization over `(c, h, w)`: each group of `c / groups`
/// channels is normalized to zero mean and unit (biased) variance, then
/// scaled by `gamma` and shifted by `beta` per channel.
pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    let (c, h, w) = check_group_norm(x, groups, gamma, beta, eps)?;
    let cpg = c / groups;
    let len = cpg * h * w;
    let n = T::from_usize(len).unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(groups),
        rstd: Vec::with_capacity(groups),
    };
    for gi in 0..groups {
        let src = &x.data()[gi * len..(gi + 1) * len];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, (o, &v)) in out[gi * len..(gi + 1) * len]
            .iter_mut()
            .zip(src)
            .enumerate()
        {
            let ch = gi * cpg + j / (h * w);
            *o = (v - mean) * rstd * gamma.data()[ch] + beta.data()[ch];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(vec![c, h, w], out)?, stats))
}

/// Gradients of [`group_norm`]: `(d_x, d_gamma, d_beta)`.
pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    stats: &GroupStats<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.dims3("group_norm_backward")?;
    x.expect_same_shape(grad_out, "group_norm_backward")?;
    let cpg = c / groups;
    let hw = h * w;
    let len = cpg * hw;
    let n = T::from_usize(len).unwrap();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for gi in 0..groups {
        let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
        let xs = &x.data()[gi * len..(gi + 1) * len];
        let gs = &grad_out.data()[gi * len..(gi + 1) * len];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..len {
            let ch = gi * cpg + j / hw;
            let xhat = (xs[j] - mean) * rstd;
            let dxhat = gs[j] * gamma.data()[ch];
            dgamma[ch] += gs[j] * xhat;
            dbeta[ch] += gs[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for j in 0..len {
            let ch = gi * cpg + j / hw;
            let xhat = (xs[j] - mean) * rstd;
            let dxhat = gs[j] * gamma.data()[ch];
            dx[gi * len + j] = rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Intermediate products of [`attention2d`], kept for the backward pass.
/// Matrices are channel-major `(c, n)` except `probs`, which is `(n, n)`.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub mixed: Vec<T>,
}

/// Single-head self-attention over the `h·w` positions of a `(c, h, w)`
/// map, with residual connection:
/// `out = x + Wo · V · softmax(Qᵀ K / √c)ᵀ` where `Q = Wq x`, `K = Wk x`,
/// `V = Wv x` act on each position's channel vector.
pub fn attention2d<T: Real>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    wo: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (c, h, w) = x.dims3("attention2d")?;
    for m in [wq, wk, wv, wo] {
        if m.shape() != [c, c] {
            return Err(Error::shape(
                "attention2d",
                format!("projection {:?} for {c} channels", m.shape()),
            ));
        }
    }
    let n = h * w;
    let project = |m: &Tensor<T>| {
        let mut out = vec![T::zero(); c * n];
        T::gemm(c, c, n, m.data(), false, x.data(), false, &mut out, false);
        out
    };
    let (q, k, v) = (project(wq), project(wk), project(wv));
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();
    // scores[i][j] = q[:, i] · k[:, j]
    let mut probs = vec![T::zero(); n * n];
    T::gemm(n, c, n, &q, true, &k, false, &mut probs, false);
    for row in probs.chunks_mut(n) {
        let mut max = T::neg_infinity();
        for s in row.iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut total = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in row.iter_mut() {
            *s /= total;
        }
    }
    // mixed[:, i] = sum_j probs[i][j] v[:, j]
    let mut mixed = vec![T::zero(); c * n];
    T::gemm(c, n, n, &v, false, &probs, true, &mut mixed, false);
    let mut out = x.data().to_vec();
    T::gemm(c, c, n, wo.data(), false, &mixed, false, &mut out, true);
    Ok((
        Tensor::new(vec![c, h, w], out)?,
        AttentionCache {
            q,
            k,
            v,
            probs,
            mixed,
        },
    ))
}

/// Gradients of [`attention2d`]: `[d_x, d_wq, d_wk, d_wv, d_wo]`.
pub fn attention2d_backward<T: Real>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    wo: &Tensor<T>,
    cache: &AttentionCache<T>,
    grad_out: &Tensor<T>,
) -> Result<[Tensor<T>; 5]> {
    let (c, h, w) = x.dims3("attention2d_backward")?;
    x.expect_same_shape(grad_out, "attention2d_backward")?;
    let n = h * w;
    let g = grad_out.data();
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();

    let mut d_wo = vec![T::zero(); c * c];
    T::gemm(c, n, c, g, false, &cache.mixed, true, &mut d_wo, false);
    let mut d_mixed = vec![T::zero(); c * n];
    T::gemm(c, c, n, wo.data(), true, g, false, &mut d_mixed, false);

    let mut d_v = vec![T::zero(); c * n];
    T::gemm(
        c,
        n,
        n,
        &d_mixed,
        false,
        &cache.probs,
        false,
        &mut d_v,
        false,
    );
    let mut d_probs = vec![T::zero(); n * n];
    T::gemm(
        n,
        c,
        n,
        &d_mixed,
        true,
        &cache.v,
        false,
        &mut d_probs,
        false,
    );

    // softmax backward, folded with the score scale
    let mut d_scores = d_probs;
    for (drow, prow) in d_scores.chunks_mut(n).zip(cache.probs.chunks(n)) {
        let dot: T = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
        for (d, &p) in drow.iter_mut().zip(prow) {
            *d = p * (*d - dot) * scale;
        }
    }
    let mut d_q = vec![T::zero(); c * n];
    T::gemm(c, n, n, &cache.k, false, &d_scores, true, &mut d_q, false);
    let mut d_k = vec![T::zero(); c * n];
    T::gemm(c, n, n, &cache.q, false, &d_scores, false, &mut d_k, false);

    let xs = x.data();
    let weight_grad = |d: &[T]| {
        let mut out = vec![T::zero(); c * c];
        T::gemm(c, n, c, d, false, xs, true, &mut out, false);
        out
    };
    let (d_wq, d_wk, d_wv) = (weight_grad(&d_q), weight_grad(&d_k), weight_grad(&d_v));

    let mut d_x = g.to_vec();
    T::gemm(c, c, n, wq.data(), true, &d_q, false, &mut d_x, true);
    T::gemm(c, c, n, wk.data(), true, &d_k, false, &mut d_x, true);
    T::gemm(c, c, n, wv.data(), true, &d_v, false, &mut d_x, true);

    let mat = |d: Vec<T>| Tensor::new(vec![c, c], d);
    Ok([
        Tensor::new(vec![c, h, w], d_x)?,
        mat(d_wq)?,
        mat(d_wk)?,
        mat(d_wv)?,
        mat(d_wo)?,
    ])
}

/// `W · x + b` for a vector `x`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (out_dim, in_dim) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} is not 2-D", weight.shape()),
            ))
        }
    };
    if x.shape() != [in_dim] || bias.shape() != [out_dim] {
        return Err(Error::shape(
            "linear",
            format!(
                "x {:?}, weight {:?}, bias {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = bias.data().to_vec();
    T::gemm(
        out_dim,
        in_dim,
        1,
        weight.data(),
        false,
        x.data(),
        false,
        &mut out,
        true,
    );
    Tensor::new(vec![out_dim], out)
}

/// Nearest-neighbour 2× upsampling of a `(c, h, w)` map.
pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("upsample")?;
    let (h2, w2) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let drow = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    Tensor::new(vec![c, h2, w2], out)
}

pub fn upsample_nearest2x_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h2, w2) = grad_out.dims3("upsample_backward")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let g = grad_out.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for xo in 0..w2 {
                out[(ch * h + y / 2) * w + xo / 2] += g[(ch * h2 + y) * w2 + xo];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Stacks two `(c_a, h, w)` and `(c_b, h, w)` maps along channels.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = a.dims3("concat")?;
    let (cb, hb, wb) = b.dims3("concat")?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(
            "concat",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

/// Adds `v[c]` to every position of channel `c`.
pub fn add_channel_bias<T: Real>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("add_channel_bias")?;
    if v.shape() != [c] {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias {:?} for {c} channels", v.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    for (plane, &b) in out.chunks_mut(h * w).zip(v.data()) {
        for o in plane {
            *o += b;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (ci, h, wd) = x.dims3("t").unwrap();
        let [co, _, kh, kw] = w.shape()[..] else {
            panic!()
        };
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((o * ci + i) * kh + ky) * kw + kx]
                                        * x.data()[(i * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_scalar_weight_scales_input() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 0).unwrap();
        assert_eq!(y, x.scale(2.0));
    }

    #[test]
    fn conv_ones_box_counts_neighbours() {
        let x = Tensor::<f64>::ones(&[1, 4, 4]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        let expect = brute_conv(&x, &w, &[0.0], 1, 1);
        assert_eq!(y.data(), &expect[..]);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[3], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_center_delta_is_identity() {
        let x = Tensor::new(vec![1, 4, 5], pseudo(20, 3)).unwrap();
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &w, None, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_matches_brute_force() {
        for (ci, co, k, stride, pad, h) in [
            (2, 3, 3, 1, 1, 6),
            (3, 2, 4, 2, 1, 8),
            (2, 2, 1, 1, 0, 5),
            (1, 4, 3, 1, 0, 7),
        ] {
            let x = Tensor::new(vec![ci, h, h], pseudo(ci * h * h, 1)).unwrap();
            let w = Tensor::new(vec![co, ci, k, k], pseudo(co * ci * k * k, 2)).unwrap();
            let b = pseudo(co, 3);
            let y = conv2d(
                &x,
                &w,
                Some(&Tensor::new(vec![co], b.clone()).unwrap()),
                stride,
                pad,
            )
            .unwrap();
            let expect = brute_conv(&x, &w, &b, stride, pad);
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f64>::ones(&[2, 4, 4]);
        assert!(conv2d(&x, &Tensor::ones(&[1, 3, 3, 3]), None, 1, 1).is_err());
        // (4 + 2 - 3) / 2 is not integral
        assert!(conv2d(&x, &Tensor::ones(&[1, 2, 3, 3]), None, 2, 1).is_err());
        assert!(conv2d(&x, &Tensor::ones(&[1, 2, 3, 3]), None, 0, 1).is_err());
    }

    #[test]
    fn group_norm_statistics() {
        let x = Tensor::new(vec![4, 2, 2], pseudo(16, 9)).unwrap();
        let (y, _) = group_norm(&x, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-12).unwrap();
        for g in y.data().chunks(8) {
            let mean: f64 = g.iter().sum::<f64>() / 8.0;
            let var: f64 = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn group_norm_degenerate_cases() {
        let x = Tensor::<f64>::full(&[4, 3, 3], 2.5);
        let (y, _) = group_norm(&x, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = Tensor::new(vec![4, 2, 2], pseudo(16, 4)).unwrap();
        let beta = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let (y, _) = group_norm(&x, 4, &Tensor::zeros(&[4]), &beta, 1e-5).unwrap();
        for (ch, plane) in y.data().chunks(4).enumerate() {
            assert!(plane.iter().all(|&v| v == beta.data()[ch]));
        }
        assert!(group_norm(&x, 3, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).is_err());
    }

    #[test]
    fn attention_single_token() {
        let x = Tensor::new(vec![3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let m = |s| Tensor::new(vec![3, 3], pseudo(9, s)).unwrap();
        let (wq, wk, wv, wo) = (m(1), m(2), m(3), m(4));
        let (y, _) = attention2d(&x, &wq, &wk, &wv, &wo).unwrap();
        let v = linear(&x.clone().reshape(&[3]).unwrap(), &wv, &Tensor::zeros(&[3])).unwrap();
        let ov = linear(&v, &wo, &Tensor::zeros(&[3])).unwrap();
        for i in 0..3 {
            assert!((y.data()[i] - (x.data()[i] + ov.data()[i])).abs() < 1e-14);
        }
        let (y0, _) = attention2d(&x, &wq, &wk, &Tensor::zeros(&[3, 3]), &wo).unwrap();
        assert_eq!(y0, x);
    }

    #[test]
    fn attention_two_tokens_matches_hand_softmax() {
        let c = 2;
        let x = Tensor::new(vec![c, 1, 2], pseudo(4, 11)).unwrap();
        let m = |s| Tensor::new(vec![c, c], pseudo(c * c, s)).unwrap();
        let (wq, wk, wv, wo) = (m(5), m(6), m(7), m(8));
        let (y, _) = attention2d(&x, &wq, &wk, &wv, &wo).unwrap();
        let tok = |j: usize| [x.data()[j], x.data()[2 + j]];
        let mv = |m: &Tensor<f64>, v: [f64; 2]| {
            let d = m.data();
            [d[0] * v[0] + d[1] * v[1], d[2] * v[0] + d[3] * v[1]]
        };
        for i in 0..2 {
            let q = mv(&wq, tok(i));
            let s: Vec<f64> = (0..2)
                .map(|j| {
                    let k = mv(&wk, tok(j));
                    (q[0] * k[0] + q[1] * k[1]) / (c as f64).sqrt()
                })
                .collect();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let z = e[0] + e[1];
            let mut mix = [0.0; 2];
            for j in 0..2 {
                let v = mv(&wv, tok(j));
                mix[0] += e[j] / z * v[0];
                mix[1] += e[j] / z * v[1];
            }
            let o = mv(&wo, mix);
            for ch in 0..2 {
                let got = y.data()[ch * 2 + i];
                assert!((got - (tok(i)[ch] + o[ch])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_roundtrip_sums_blocks() {
        let x = Tensor::new(vec![2, 2, 3], pseudo(12, 5)).unwrap();
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 6]);
        assert_eq!(upsample_nearest2x_backward(&y).unwrap(), x.scale(4.0));
    }
}
