//! Forward and backward kernels on plain tensors.
//!
//! Every reduction accumulates left to right in a fixed order, and each output
//! element is produced by exactly one worker, so results are bit-identical
//! across runs and thread counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pointwise nonlinearity used in the refinement convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    /// `sigmoid(x) - 0.5`, an odd function like `tanh`.
    ShiftedSigmoid,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Tanh, Activation::ShiftedSigmoid, Activation::Relu];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::ShiftedSigmoid => "shifted_sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "shifted_sigmoid" | "sigmoid-0.5" => Some(Activation::ShiftedSigmoid),
            _ => None,
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::ShiftedSigmoid => sigmoid(x) - T::of(0.5),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::ShiftedSigmoid => {
                let s = y + T::of(0.5);
                s * (T::one() - s)
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Geometry of a 2-D convolution, validated against its operands.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub input: Shape,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let is = input.shape();
        let ws = weight.shape();
        if ws.c != is.c {
            return Err(Error::shape(
                "conv2d",
                "cin",
                format!("input has {} channels, weight expects {}", is.c, ws.c),
            ));
        }
        if ws.h % 2 == 0 || ws.w % 2 == 0 {
            return Err(Error::shape("conv2d", "kernel", format!("kernel {}x{} must be odd", ws.h, ws.w)));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride", "stride must be >= 1"));
        }
        if let Some(b) = bias {
            if b.len() != ws.n {
                return Err(Error::shape(
                    "conv2d",
                    "bias",
                    format!("bias has {} entries for {} output channels", b.len(), ws.n),
                ));
            }
        }
        let span_h = is.h + 2 * padding;
        let span_w = is.w + 2 * padding;
        if span_h < ws.h {
            return Err(Error::shape("conv2d", "h", format!("padded height {span_h} < kernel {}", ws.h)));
        }
        if span_w < ws.w {
            return Err(Error::shape("conv2d", "w", format!("padded width {span_w} < kernel {}", ws.w)));
        }
        Ok(ConvGeom {
            input: is,
            cout: ws.n,
            kh: ws.h,
            kw: ws.w,
            stride,
            padding,
            oh: (span_h - ws.h) / stride + 1,
            ow: (span_w - ws.w) / stride + 1,
        })
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.input.n, self.cout, self.oh, self.ow)
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        (y < self.input.h).then_some(y)
    }

    /// Range of output columns whose source column is in bounds, for stride 1.
    #[inline]
    fn unit_stride_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx);
        let hi = self.ow.min((self.input.w + self.padding).saturating_sub(kx));
        (lo, hi.max(lo))
    }
}

/// Zero-padded cross-correlation (no kernel flip).
///
/// Each output element is `bias + sum_{ci, ky, kx} w * x` accumulated in that
/// loop order; padded taps are skipped.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, bias, stride, padding)?;
    Ok(conv2d_unchecked(&g, input, weight, bias))
}

pub(crate) fn conv2d_unchecked<T: Scalar>(
    g: &ConvGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let out_shape = g.output();
    let plane = g.oh * g.ow;
    let cin = g.input.c;
    let iw = g.input.w;
    let wd = weight.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    if plane == 0 {
        return Tensor::from_parts(out_shape, out);
    }
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (b, co) = (idx / g.cout, idx % g.cout);
        let init = bias.map_or(T::zero(), |bv| bv.data()[co]);
        o.fill(init);
        // Row at a time so the output row stays in cache; each element still
        // accumulates over ci, ky, kx in that order.
        for (oy, or) in o.chunks_exact_mut(g.ow).enumerate() {
            for ci in 0..cin {
                let x = input.plane(b, ci);
                for ky in 0..g.kh {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    let xr = &x[iy * iw..(iy + 1) * iw];
                    let wrow = &wd[((co * cin + ci) * g.kh + ky) * g.kw..][..g.kw];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        if g.stride == 1 {
                            let (lo, hi) = g.unit_stride_cols(kx);
                            if lo == hi {
                                continue;
                            }
                            let src = (lo + kx) - g.padding;
                            for (ov, &xv) in or[lo..hi].iter_mut().zip(&xr[src..src + (hi - lo)]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (ox, ov) in or.iter_mut().enumerate() {
                                if let Some(ix) = (ox * g.stride + kx).checked_sub(g.padding) {
                                    if ix < iw {
                                        *ov += wv * xr[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_parts(out_shape, out)
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_grad_input<T: Scalar>(g: &ConvGeom, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let is = g.input;
    let plane = is.plane();
    let cin = is.c;
    let iw = is.w;
    let wd = weight.data();
    let mut gi = vec![T::zero(); is.numel()];
    if plane == 0 {
        return Tensor::from_parts(is, gi);
    }
    gi.par_chunks_mut(plane).enumerate().for_each(|(idx, gx)| {
        let (b, ci) = (idx / cin, idx % cin);
        for co in 0..g.cout {
            let go = grad_out.plane(b, co);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wd[((co * cin + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src_row(oy, ky) else { continue };
                        let gr = &go[oy * g.ow..(oy + 1) * g.ow];
                        let xr = &mut gx[iy * iw..(iy + 1) * iw];
                        if g.stride == 1 {
                            let (lo, hi) = g.unit_stride_cols(kx);
                            let shift = kx as isize - g.padding as isize;
                            for ox in lo..hi {
                                xr[(ox as isize + shift) as usize] += wv * gr[ox];
                            }
                        } else {
                            for (ox, &gv) in gr.iter().enumerate() {
                                if let Some(ix) = (ox * g.stride + kx).checked_sub(g.padding) {
                                    if ix < iw {
                                        xr[ix] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_parts(is, gi)
}

/// Gradients of a convolution with respect to weight and bias.
pub(crate) fn conv2d_grad_params<T: Scalar>(
    g: &ConvGeom,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let cin = g.input.c;
    let iw = g.input.w;
    let per_co = cin * g.kh * g.kw;
    let mut gw = vec![T::zero(); g.cout * per_co];
    gw.par_chunks_mut(per_co.max(1)).enumerate().for_each(|(co, gwc)| {
        for ci in 0..cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = T::zero();
                    for b in 0..g.input.n {
                        let go = grad_out.plane(b, co);
                        let x = input.plane(b, ci);
                        for oy in 0..g.oh {
                            let Some(iy) = g.src_row(oy, ky) else { continue };
                            let gr = &go[oy * g.ow..(oy + 1) * g.ow];
                            let xr = &x[iy * iw..(iy + 1) * iw];
                            if g.stride == 1 {
                                let (lo, hi) = g.unit_stride_cols(kx);
                                let shift = kx as isize - g.padding as isize;
                                for ox in lo..hi {
                                    acc += gr[ox] * xr[(ox as isize + shift) as usize];
                                }
                            } else {
                                for (ox, &gv) in gr.iter().enumerate() {
                                    if let Some(ix) = (ox * g.stride + kx).checked_sub(g.padding) {
                                        if ix < iw {
                                            acc += gv * xr[ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    gwc[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    let mut gb = vec![T::zero(); g.cout];
    for (co, slot) in gb.iter_mut().enumerate() {
        let mut acc = T::zero();
        for b in 0..g.input.n {
            for &v in grad_out.plane(b, co) {
                acc += v;
            }
        }
        *slot = acc;
    }
    (
        Tensor::from_parts(Shape::new(g.cout, cin, g.kh, g.kw), gw),
        Tensor::from_parts(Shape::new(1, g.cout, 1, 1), gb),
    )
}

/// Depth-to-space: `out[n, c, y*r+i, x*r+j] = in[n, c*r*r + i*r + j, y, x]`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            "c",
            format!("{} channels not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let oc = s.c / (r * r);
    let out = Shape::new(s.n, oc, s.h * r, s.w * r);
    Ok(Tensor::from_fn(out, |n, c, y, x| {
        let (i, j) = (y % r, x % r);
        input.at(n, c * r * r + i * r + j, y / r, x / r)
    }))
}

/// Space-to-depth; the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            "h/w",
            format!("{}x{} not divisible by {r}", s.h, s.w),
        ));
    }
    let out = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    Ok(Tensor::from_fn(out, |n, c, y, x| {
        let (base, rem) = (c / (r * r), c % (r * r));
        input.at(n, base, y * r + rem / r, x * r + rem % r)
    }))
}

/// Mean of every channel plane, producing `n x c x 1 x 1`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::shape("global_avg_pool", "h/w", format!("empty spatial plane in {s}")));
    }
    let denom = T::of(s.plane() as f64);
    Ok(Tensor::from_fn([s.n, s.c, 1, 1], |n, c, _, _| {
        let mut acc = T::zero();
        for &v in input.plane(n, c) {
            acc += v;
        }
        acc / denom
    }))
}

/// Max pooling with implicit `-inf` padding. Returns the output and, for each
/// output element, the flat input index that supplied the maximum.
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if kernel == 0 || stride == 0 || padding >= kernel {
        return Err(Error::invalid(format!(
            "max_pool2d: kernel {kernel}, stride {stride}, padding {padding}"
        )));
    }
    if s.h + 2 * padding < kernel || s.w + 2 * padding < kernel {
        return Err(Error::shape(
            "max_pool2d",
            "h/w",
            format!("{}x{} too small for kernel {kernel} with padding {padding}", s.h, s.w),
        ));
    }
    let oh = (s.h + 2 * padding - kernel) / stride + 1;
    let ow = (s.w + 2 * padding - kernel) / stride + 1;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                let y0 = (oy * stride) as isize - padding as isize;
                for ox in 0..ow {
                    let x0 = (ox * stride) as isize - padding as isize;
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for y in y0.max(0)..(y0 + kernel as isize).min(s.h as isize) {
                        for x in x0.max(0)..(x0 + kernel as isize).min(s.w as isize) {
                            let at = s.offset(n, c, y as usize, x as usize);
                            let v = input.data()[at];
                            if best_at == usize::MAX || v > best {
                                best = v;
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_at);
                }
            }
        }
    }
    Ok((Tensor::from_parts(out_shape, out), arg))
}

/// Source taps for one axis of a half-pixel-centred bilinear resize.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (no corner alignment).
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if oh == 0 || ow == 0 || s.plane() == 0 {
        return Err(Error::shape("resize_bilinear", "h/w", format!("{}x{} -> {oh}x{ow}", s.h, s.w)));
    }
    let ty = bilinear_taps(oh, s.h);
    let tx = bilinear_taps(ow, s.w);
    Ok(Tensor::from_fn([s.n, s.c, oh, ow], |n, c, y, x| {
        let (y0, y1, ly) = ty[y];
        let (x0, x1, lx) = tx[x];
        let (ly, lx) = (T::of(ly), T::of(lx));
        let p = input.plane(n, c);
        let top = p[y0 * s.w + x0] * (T::one() - lx) + p[y0 * s.w + x1] * lx;
        let bot = p[y1 * s.w + x0] * (T::one() - lx) + p[y1 * s.w + x1] * lx;
        top * (T::one() - ly) + bot * ly
    }))
}

pub(crate) fn resize_bilinear_backward<T: Scalar>(grad_out: &Tensor<T>, input: Shape) -> Tensor<T> {
    let gs = grad_out.shape();
    let ty = bilinear_taps(gs.h, input.h);
    let tx = bilinear_taps(gs.w, input.w);
    let mut gi = Tensor::zeros(input);
    let d = gi.data_mut();
    for n in 0..gs.n {
        for c in 0..gs.c {
            let base = input.offset(n, c, 0, 0);
            for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (x, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let g = grad_out.at(n, c, y, x);
                    let (ly, lx) = (T::of(ly), T::of(lx));
                    d[base + y0 * input.w + x0] += g * (T::one() - ly) * (T::one() - lx);
                    d[base + y0 * input.w + x1] += g * (T::one() - ly) * lx;
                    d[base + y1 * input.w + x0] += g * ly * (T::one() - lx);
                    d[base + y1 * input.w + x1] += g * ly * lx;
                }
            }
        }
    }
    gi
}

/// Multiplies each channel plane of `x` by the matching `gate[n, c]` entry.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let gsh = gate.shape();
    if (gsh.n, gsh.c, gsh.h, gsh.w) != (s.n, s.c, 1, 1) {
        return Err(Error::shape("channel_scale", "c", format!("gate {gsh} for features {s}")));
    }
    let plane = s.plane();
    let mut data = x.data().to_vec();
    if plane > 0 {
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let k = gate.data()[i];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(Tensor::from_parts(s, data))
}
