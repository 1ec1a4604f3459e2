use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Principal axes of a centred data matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `k x d`, one unit-length component per row, by descending variance.
    pub components: DMatrix<f64>,
    /// Sample variance along each component.
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits the top `k` components of the rows of `x` (`n x d`).
    ///
    /// Signs are fixed so that each component's largest-magnitude loading is
    /// positive (first such index on ties).
    pub fn fit(x: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n < 2 {
            return Err(Error::invalid(format!("pca needs at least 2 rows, got {n}")));
        }
        let max_k = (n - 1).min(d);
        if k == 0 || k > max_k {
            return Err(Error::invalid(format!("pca: k = {k} outside 1..={max_k} for {n}x{d} data")));
        }
        let mean = x.row_mean().transpose();
        let mut centred = x.clone();
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = DMatrix::zeros(k, d);
        let mut variances = Vec::with_capacity(k);
        for (r, &j) in order.iter().take(k).enumerate() {
            let mut v = eig.eigenvectors.column(j).into_owned();
            let pivot = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[pivot] < 0.0 {
                v.neg_mut();
            }
            components.set_row(r, &v.transpose());
            variances.push(eig.eigenvalues[j].max(0.0));
        }
        Ok(Pca {
            mean,
            components,
            variances,
        })
    }

    /// `n x k` coordinates of the rows of `x`.
    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centred = x.clone();
        for mut row in centred.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centred * self.components.transpose()
    }
}

/// Centres the rows of `x` and projects them onto the top `k` principal directions.
pub fn pca_project(x: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    Ok(Pca::fit(x, k)?.transform(x))
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `k x d`.
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // Rounding can exhaust the loop; fall back to the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` updates have run. A cluster that empties is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let (n, d) = x.shape();
    if k == 0 {
        return Err(Error::invalid("kmeans: k must be >= 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("kmeans: {n} points cannot form {k} clusters")));
    }
    let points: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&points, k, &mut rng);

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        points.iter().map(|p| nearest(p, centroids)).unzip()
    };
    let (mut labels, mut dists) = assign(&centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                log::debug!("kmeans: cluster {j} empty, re-seeding at point {far}");
                centroids[j] = points[far].clone();
                dists[far] = 0.0;
            }
        }
        let (next, next_d) = assign(&centroids);
        history.push(next_d.iter().sum());
        let done = next == labels;
        labels = next;
        dists = next_d;
        if done {
            break;
        }
    }
    let inertia = *history.last().unwrap();
    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    Ok(KMeans {
        labels,
        centroids: DMatrix::from_row_slice(k, d, &flat),
        inertia,
        history,
        iterations,
    })
}
