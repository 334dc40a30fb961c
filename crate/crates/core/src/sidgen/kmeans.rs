use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop when the relative change in inertia falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Matrix<f32>,
    /// Nearest-centroid index of every point (lowest index on ties).
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

/// Squared euclidean distance, accumulated in double precision in index
/// order.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        s += d * d;
    }
    s
}

/// Index and squared distance of the nearest row of `centroids`; the lowest
/// index wins ties.
pub fn nearest(point: &[f32], centroids: &Matrix<f32>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Clusters that empty out are
/// re-seeded at the point farthest from its centroid. The returned
/// assignments come from a final assignment step.
pub fn kmeans(points: &Matrix<f32>, j: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Empty("k-means points"));
    }
    if j == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one cluster".into()));
    }
    let dim = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = plus_plus_init(points, j, &mut rng);

    let mut assignments = vec![0usize; n];
    let mut dists = vec![0f64; n];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        let inertia = assign(points, &centroids, &mut assignments, &mut dists);
        reseed_empty(points, &mut centroids, &mut assignments, &mut dists);

        // Update step: mean of each non-empty cluster.
        let mut sums = vec![0f64; j * dim];
        let mut counts = vec![0usize; j];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x as f64;
            }
        }
        for c in 0..j {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = (s * inv) as f32;
                }
            }
        }

        let change = if prev_inertia.is_finite() && prev_inertia > 0.0 {
            (prev_inertia - inertia).abs() / prev_inertia
        } else if prev_inertia == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        prev_inertia = inertia;
        if change < cfg.tol {
            break;
        }
    }

    let inertia = assign(points, &centroids, &mut assignments, &mut dists);
    Ok(KMeansResult { centroids, assignments, inertia, iterations })
}

fn assign(points: &Matrix<f32>, centroids: &Matrix<f32>, assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..points.rows() {
        let (a, d) = nearest(points.row(i), centroids);
        assignments[i] = a;
        dists[i] = d;
        total += d;
    }
    total
}

fn reseed_empty(points: &Matrix<f32>, centroids: &mut Matrix<f32>, assignments: &mut [usize], dists: &mut [f64]) {
    let j = centroids.rows();
    let mut counts = vec![0usize; j];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for c in 0..j {
        if counts[c] > 0 {
            continue;
        }
        // Farthest point from its own centroid; only points whose cluster
        // keeps another member may move.
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in dists.iter().enumerate() {
            if counts[assignments[i]] > 1 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, d)) if d > 0.0 => {
                centroids.row_mut(c).copy_from_slice(points.row(i));
                counts[assignments[i]] -= 1;
                counts[c] += 1;
                assignments[i] = c;
                dists[i] = 0.0;
            }
            _ => {
                // Every point sits on its centroid: park this one on the
                // farthest point anyway; it stays unused.
                let i = farthest(dists);
                centroids.row_mut(c).copy_from_slice(points.row(i));
            }
        }
    }
}

fn farthest(dists: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in dists.iter().enumerate() {
        if d > dists[best] {
            best = i;
        }
    }
    best
}

fn plus_plus_init(points: &Matrix<f32>, j: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
    let n = points.rows();
    let mut centroids = Matrix::zeros(j, points.cols());
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..j {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            farthest(&d2)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}
