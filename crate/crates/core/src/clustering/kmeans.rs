use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ChaiError, Result};
use crate::model::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the relative SSE improvement of an iteration falls below this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            seed: 0,
            restarts: 10,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

impl KMeansOptions {
    pub fn with_seed(self, seed: u64) -> Self {
        KMeansOptions { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    /// SSE after seeding and after every Lloyd iteration of the winning restart.
    pub sse_history: Vec<f64>,
}

/// Mixes `parts` into `base` to give independent, reproducible sub-seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut rng = SplitMix64::new(base);
    let mut acc = rng.next_u64();
    for &p in parts {
        let mut r = SplitMix64::new(acc ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        acc = r.next_u64();
    }
    acc
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` by SSE.
///
/// Deterministic for a given point order and seed. Clusters emptied during
/// an iteration take the point farthest from its centroid among clusters
/// that can spare one.
pub fn kmeans(points: &[Vec<f64>], k: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(ChaiError::Argument(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let dim = points[0].len();
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return Err(ChaiError::Shape(format!(
            "point {i} has dimension {}, expected {dim}",
            points[i].len()
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[restart as u64]));
        let run = lloyd(points, k, seed_plus_plus(points, k, &mut rng), opts);
        if best.as_ref().map_or(true, |b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[first]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[pick]));
        }
    }
    centroids
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn min_sse(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| nearest(p, centroids).1).sum()
}

fn assign(points: &[Vec<f64>], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let k = centroids.len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, centroids).0).collect();
    loop {
        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return assignment;
        };
        let donor = (0..points.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .max_by(|&a, &b| {
                let da = squared_distance(&points[a], &centroids[assignment[a]]);
                let db = squared_distance(&points[b], &centroids[assignment[b]]);
                // farthest first, lowest index on ties
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n guarantees a cluster with spare points");
        assignment[donor] = empty;
        centroids[empty] = points[donor].clone();
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= n as f64;
        }
    }
    sums
}

fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    mut centroids: Vec<Vec<f64>>,
    opts: &KMeansOptions,
) -> KMeansResult {
    let mut history = vec![min_sse(points, &centroids)];
    let mut assignment: Vec<usize> = Vec::new();
    for _ in 0..opts.max_iter {
        let next = assign(points, &mut centroids);
        let stable = next == assignment;
        assignment = next;
        centroids = means(points, &assignment, k);
        let sse = min_sse(points, &centroids);
        let prev = *history.last().expect("seeded");
        history.push(sse);
        if stable || prev - sse <= opts.tol * prev {
            break;
        }
    }
    // Settle on the nearest-centroid assignment of the final centroids.
    let next = assign(points, &mut centroids);
    if next != assignment {
        assignment = next;
        centroids = means(points, &assignment, k);
        history.push(min_sse(points, &centroids));
    }
    let sse = points
        .iter()
        .zip(&assignment)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum();
    KMeansResult {
        assignment,
        centroids,
        sse,
        sse_history: history,
    }
}
