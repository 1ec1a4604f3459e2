//! Image-quality and content metrics.
//!
//! Conventions: PSNR is computed jointly over all RGB channels; SSIM, SI and
//! TI on the BT.601 luma plane. Images are `[0, 1]`-scaled tensors; a batch
//! dimension greater than one is averaged (PSNR uses the pooled MSE).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::sobel_map;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A single-channel plane in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// BT.601 luma of every sample in the batch. One-channel inputs pass through.
pub fn luma<T: Scalar>(img: &Tensor<T>) -> Result<Vec<Plane>> {
    let s = img.shape();
    (0..s.n)
        .map(|n| {
            let data = match s.c {
                1 => img.plane(n, 0).iter().map(|v| v.to_f64_lossy()).collect(),
                3 => {
                    let (r, g, b) = (img.plane(n, 0), img.plane(n, 1), img.plane(n, 2));
                    (0..s.plane())
                        .map(|i| {
                            LUMA[0] * r[i].to_f64_lossy()
                                + LUMA[1] * g[i].to_f64_lossy()
                                + LUMA[2] * b[i].to_f64_lossy()
                        })
                        .collect()
                }
                c => return Err(Error::shape("luma", "c", format!("{c} channels; expected 1 or 3"))),
            };
            Ok(Plane { h: s.h, w: s.w, data })
        })
        .collect()
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, "shape", format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` over all elements; [`PSNR_IDENTICAL`] when MSE is 0.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("psnr peak {peak} must be > 0")));
    }
    if a.is_empty() {
        return Err(Error::invalid("psnr of empty images"));
    }
    let mut se = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64_lossy() - y.to_f64_lossy();
        se += d * d;
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::invalid(format!("ssim window {} must be odd", self.window)));
        }
        if !(self.sigma > 0.0 && self.peak > 0.0) {
            return Err(Error::invalid("ssim sigma and peak must be > 0"));
        }
        Ok(())
    }
}

/// Separable 'valid' filtering with a symmetric 1-D kernel.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (oh, ow) = (p.h + 1 - n, p.w + 1 - n);
    let mut tmp = vec![0.0; p.h * ow];
    for y in 0..p.h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * p.at(y, x + i);
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    Plane { h: oh, w: ow, data: out }
}

fn ssim_plane(a: &Plane, b: &Plane, params: &SsimParams, k: &[f64]) -> f64 {
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let prod = |f: fn(f64, f64) -> f64| Plane {
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = filter_valid(a, k);
    let mu_b = filter_valid(b, k);
    let aa = filter_valid(&prod(|x, _| x * x), k);
    let bb = filter_valid(&prod(|_, y| y * y), k);
    let ab = filter_valid(&prod(|x, y| x * y), k);
    let mut total = 0.0;
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.data.len() as f64
}

/// Mean Gaussian-weighted SSIM over all valid window positions of the luma
/// plane, averaged over the batch.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, params: &SsimParams) -> Result<f64> {
    same_shape("ssim", a, b)?;
    params.validate()?;
    let s = a.shape();
    if s.h < params.window || s.w < params.window {
        return Err(Error::shape(
            "ssim",
            "h/w",
            format!("{}x{} is smaller than the {} window", s.h, s.w, params.window),
        ));
    }
    if s.n == 0 {
        return Err(Error::invalid("ssim of an empty batch"));
    }
    let k = params.kernel();
    let (la, lb) = (luma(a)?, luma(b)?);
    let total: f64 = la.iter().zip(&lb).map(|(x, y)| ssim_plane(x, y, params, &k)).sum();
    Ok(total / s.n as f64)
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    var.sqrt()
}

/// Spatial information: population std of the Sobel gradient magnitude of
/// the luma plane over the valid (unpadded) region. Uses the first batch
/// sample.
pub fn si<T: Scalar>(frame: &Tensor<T>) -> Result<f64> {
    let s = frame.shape();
    if s.h < 3 || s.w < 3 || s.n == 0 {
        return Err(Error::shape("si", "h/w", format!("frame {s} is smaller than 3x3")));
    }
    let y = luma(frame)?.swap_remove(0);
    let g = Graph::<f64>::inference();
    let img = g.constant(Tensor::new([1, 1, y.h, y.w], y.data)?);
    let (gx, gy) = sobel_map(&g, &img)?;
    let magnitude = gx.value().data().iter().zip(gy.value().data()).map(|(a, b)| (a * a + b * b).sqrt());
    Ok(population_std(magnitude))
}

/// Temporal information: population std of the luma difference `cur - prev`.
pub fn ti<T: Scalar>(prev: &Tensor<T>, cur: &Tensor<T>) -> Result<f64> {
    same_shape("ti", prev, cur)?;
    if prev.shape().n == 0 || prev.shape().plane() == 0 {
        return Err(Error::shape("ti", "h/w", "empty frame"));
    }
    let a = luma(prev)?.swap_remove(0);
    let b = luma(cur)?.swap_remove(0);
    Ok(population_std(b.data.iter().zip(&a.data).map(|(x, y)| x - y)))
}

/// Per-frame content statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub si: f64,
    /// Absent for the first frame of a sequence.
    pub ti: Option<f64>,
    /// Bits per second of the source stream, supplied by the caller.
    pub bitrate: f64,
}

pub fn frame_stats<T: Scalar>(frames: &[Tensor<T>], bitrate: f64) -> Result<Vec<FrameStats>> {
    if !(bitrate >= 0.0) {
        return Err(Error::invalid(format!("bitrate {bitrate} must be >= 0")));
    }
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let ti = if i == 0 { None } else { Some(ti(&frames[i - 1], f)?) };
            Ok(FrameStats { si: si(f)?, ti, bitrate })
        })
        .collect()
}

/// Per-video `(SI, TI)`: the maximum over frames. TI is 0 for a single frame.
pub fn aggregate_max(stats: &[FrameStats]) -> (f64, f64) {
    let si = stats.iter().map(|s| s.si).fold(0.0, f64::max);
    let ti = stats.iter().filter_map(|s| s.ti).fold(0.0, f64::max);
    (si, ti)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("pearson: lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::invalid("pearson: x has zero variance"));
    }
    if syy == 0.0 {
        return Err(Error::invalid("pearson: y has zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean, sample standard deviation and normal-approximation 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 when `n < 2`.
    pub std: f64,
    /// Half-width `1.96 * std / sqrt(n)`.
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Summary {
                n,
                mean: f64::NAN,
                std: 0.0,
                ci95: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        // Identical values (including infinite PSNRs) have no spread.
        let std = if n < 2 || values.iter().all(|&v| v == values[0]) {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary {
            n,
            mean,
            std,
            ci95: 1.96 * std / (n as f64).sqrt(),
        }
    }
}
