//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use efrlfn::{Graph, Result, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Uniform values with magnitude in `[lo, hi]` and random sign, keeping
/// finite differences clear of kinks at zero.
pub fn away_from_zero(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(lo..hi);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced `gap` apart in shuffled order, so max-selections
/// cannot flip under a finite-difference step.
pub fn distinct(shape: [usize; 4], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * gap - 0.5 * n as f64 * gap).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

pub type ScalarFn<'a> = dyn Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'a;

/// Largest relative error between reverse-mode gradients and central
/// differences of `f` with respect to every element of every input.
pub fn max_grad_error(inputs: &[Tensor<f64>], f: &ScalarFn<'_>) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars).expect("forward");
    g.backward(&loss).expect("backward");
    let eval = |k: usize, i: usize, delta: f64| -> f64 {
        let g = Graph::inference();
        let vars: Vec<Var<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                if j == k {
                    let mut d = t.data().to_vec();
                    d[i] += delta;
                    g.constant(Tensor::new(t.shape(), d).unwrap())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        f(&g, &vars).expect("forward").item().unwrap()
    };
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(&vars[k]).unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let a = analytic.data()[i];
            let n = (eval(k, i, FD_STEP) - eval(k, i, -FD_STEP)) / (2.0 * FD_STEP);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Direct zero-padded cross-correlation. Each output starts at the bias and
/// accumulates over input channel, kernel row, kernel column.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Vec::with_capacity(xs.n * ws.n * oh * ow);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(Shape::new(xs.n, ws.n, oh, ow), out).unwrap()
}

/// Sub-pixel rearrangement written out by index.
pub fn naive_pixel_shuffle(x: &Tensor<f64>, r: usize) -> Tensor<f64> {
    let s = x.shape();
    let c = s.c / (r * r);
    Tensor::from_fn([s.n, c, s.h * r, s.w * r], |n, ch, y, xx| {
        x.at(n, ch * r * r + (y % r) * r + xx % r, y / r, xx / r)
    })
}

/// Mean squared error over every element, as a plain loop.
pub fn straight_mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        s += (x - y) * (x - y);
    }
    s / a.len() as f64
}

pub fn line(ok: bool, name: &str, detail: &str) -> String {
    format!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" })
}
