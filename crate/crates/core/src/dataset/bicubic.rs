use crate::error::{Error, Result};
use crate::model::Upscaler;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keys cubic convolution coefficient.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic kernel with `a = -0.5`; support `(-2, 2)`.
pub fn keys(t: f64) -> f64 {
    let a = KEYS_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Four source taps and weights for every output coordinate along one axis.
///
/// Pixel centres are aligned (`src = (dst + 0.5) * in / out - 0.5`); taps
/// outside the image are clamped to the edge. No antialiasing on downscale.
fn taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let frac = src - base;
            let base = base as isize;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                idx[k] = (base + k as isize - 1).clamp(0, last) as usize;
                w[k] = keys(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling of every plane, clamped to `[0, 1]`.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bicubic_resize", "h/w", format!("output {out_h}x{out_w} is empty")));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("bicubic_resize", "h/w", format!("input {s} is empty")));
    }
    let tx = taps(s.w, out_w);
    let ty = taps(s.h, out_h);
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    let mut rows = vec![0.0; s.h * out_w];
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = img.plane(n, c);
            for y in 0..s.h {
                let row = &plane[y * s.w..(y + 1) * s.w];
                for (x, (idx, w)) in tx.iter().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += w[k] * row[idx[k]].to_f64_lossy();
                    }
                    rows[y * out_w + x] = acc;
                }
            }
            for (idx, w) in &ty {
                for x in 0..out_w {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += w[k] * rows[idx[k] * out_w + x];
                    }
                    out.push(T::of(acc.clamp(0.0, 1.0)));
                }
            }
        }
    }
    Tensor::new([s.n, s.c, out_h, out_w], out)
}

/// Bicubic interpolation as a super-resolution baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bicubic {
    pub scale: usize,
}

impl<T: Scalar> Upscaler<T> for Bicubic {
    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let s = lr.shape();
        bicubic_resize(lr, s.h * self.scale, s.w * self.scale)
    }
}
