//! Lloyd's K-means with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const MAX_ITERS: usize = 300;
/// Largest center displacement (Euclidean) that counts as converged.
pub const SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// `K × d`.
    pub centers: Tensor,
    /// Cluster of every input point in the final assignment step.
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of times an empty cluster was re-seeded.
    pub reseeded: usize,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest center; ties go to the lowest index.
pub fn nearest(point: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centers.rows() {
        let d = sq_dist(point, centers.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seed(points: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let (n, d) = (points.rows(), points.last_dim());
    let mut centers = Vec::with_capacity(k * d);
    centers.extend_from_slice(points.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), &centers[..d]))
        .collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(points.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points.row(i), &centers[start..]));
        }
    }
    Tensor::new(&[k, d], centers).expect("k·d center entries")
}

/// Clusters the rows of `points` (`N × d`) into `k` groups.
pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<KMeansFit> {
    points.expect_rank(2, "K-means input")?;
    let (n, d) = (points.rows(), points.last_dim());
    if k == 0 {
        return Err(Error::invalid("K-means needs K ≥ 1"));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "K-means with K={k} needs at least {k} points, got {n}"
        )));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("K-means input"));
    }
    let mut rng = rng_for(seed, "kmeans");
    let mut centers = plus_plus_seed(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut reseeded = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERS {
        iterations += 1;
        let mut inertia = 0.0;
        for i in 0..n {
            let (c, dd) = nearest(points.row(i), &centers);
            assignments[i] = c;
            dists[i] = dd;
            inertia += dd;
        }
        trace.push(inertia);

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate().take(n) {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut next = vec![0.0; k * d];
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its own center; ties to the lowest index
                let far = (0..n).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                next[c * d..(c + 1) * d].copy_from_slice(points.row(far));
                dists[far] = 0.0;
                reseeded += 1;
            } else {
                for (o, s) in next[c * d..(c + 1) * d]
                    .iter_mut()
                    .zip(&sums[c * d..(c + 1) * d])
                {
                    *o = s / counts[c] as f64;
                }
            }
        }
        let next = Tensor::new(&[k, d], next)?;
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centers.row(c)).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < SHIFT_TOL {
            converged = true;
            break;
        }
    }
    // final assignment against the returned centers
    for (i, a) in assignments.iter_mut().enumerate() {
        *a = nearest(points.row(i), &centers).0;
    }
    Ok(KMeansFit {
        centers,
        assignments,
        inertia_trace: trace,
        iterations,
        converged,
        reseeded,
    })
}

/// Errors when two centers lie within `tol` (Euclidean) of each other.
pub fn check_distinct(centers: &Tensor, tol: f64) -> Result<()> {
    for a in 0..centers.rows() {
        for b in a + 1..centers.rows() {
            if sq_dist(centers.row(a), centers.row(b)).sqrt() <= tol {
                return Err(Error::invalid(format!(
                    "centers {a} and {b} coincide; the data has fewer distinct points than clusters"
                )));
            }
        }
    }
    Ok(())
}
