//! Seeded procedural test images: a smooth colour ramp overlaid with hard
//! edged rectangles, discs and a stripe patch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

enum Figure {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
    Stripes { y0: f64, x0: f64, y1: f64, x1: f64, period: f64 },
}

impl Figure {
    fn covers(&self, y: f64, x: f64) -> bool {
        match *self {
            Figure::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Figure::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) < r * r,
            Figure::Stripes {
                y0,
                x0,
                y1,
                x1,
                period,
            } => (y0..y1).contains(&y) && (x0..x1).contains(&x) && ((x + y) / period).floor() as i64 % 2 == 0,
        }
    }
}

/// A `[1, 3, h, w]` image in `[0, 1]`, fully determined by `seed`.
pub fn procedural_image<T: Scalar>(seed: u64, h: usize, w: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f64; 3]; 2] = [
        [rng.random(), rng.random(), rng.random()],
        [rng.random(), rng.random(), rng.random()],
    ];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (hf, wf) = (h as f64, w as f64);
    let mut shapes = Vec::new();
    for i in 0..6 {
        let colour: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let cy = rng.random_range(0.0..hf);
        let cx = rng.random_range(0.0..wf);
        let ext = rng.random_range(0.1..0.35) * hf.min(wf);
        let figure = match i % 3 {
            0 => Figure::Rect {
                y0: cy - ext,
                x0: cx - ext * 0.7,
                y1: cy + ext * 0.6,
                x1: cx + ext,
            },
            1 => Figure::Disc { cy, cx, r: ext },
            _ => Figure::Stripes {
                y0: cy - ext,
                x0: cx - ext,
                y1: cy + ext,
                x1: cx + ext,
                period: rng.random_range(2.0..6.0),
            },
        };
        shapes.push((figure, colour));
    }
    let (sa, ca) = angle.sin_cos();
    let diag = (hf * hf + wf * wf).sqrt().max(1.0);
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = None;
        for (figure, colour) in shapes.iter().rev() {
            if figure.covers(yf, xf) {
                v = Some(colour[c]);
                break;
            }
        }
        let v = v.unwrap_or_else(|| {
            let t = (((xf - wf / 2.0) * ca + (yf - hf / 2.0) * sa) / diag + 0.5).clamp(0.0, 1.0);
            base[0][c] * (1.0 - t) + base[1][c] * t
        });
        T::of(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a: Tensor<f64> = procedural_image(4, 20, 24);
        assert_eq!(a, procedural_image(4, 20, 24));
        assert_ne!(a, procedural_image(5, 20, 24));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
