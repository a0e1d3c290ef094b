use crate::error::{Error, Result};

use super::{Rng, Tensor};

pub const KMEANS_MAX_ITERS: usize = 100;
/// Largest centroid movement at which Lloyd iterations stop.
pub const KMEANS_TOL: f64 = 1e-9;
/// Independent k-means++ initializations; the lowest-SSE run wins.
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster index per input point.
    pub labels: Vec<usize>,
    /// Centroids in cluster-index order (not sorted).
    pub centroids: Vec<f64>,
    /// Within-cluster sum of squared distances of the final partition.
    pub sse: f64,
    /// SSE after every Lloyd update of the winning run.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

/// One-dimensional k-means over a rank-1 tensor.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng) -> Result<KMeans> {
    if points.rank() != 1 {
        return Err(Error::dim("kmeans expects a rank-1 tensor"));
    }
    kmeans_1d(&points.to_f64(), k, rng)
}

/// One-dimensional k-means: k-means++ seeding followed by Lloyd iterations.
///
/// Runs [`KMEANS_RESTARTS`] seedings drawn from `rng` and keeps the partition
/// with the smallest SSE (earliest run on ties). Fewer than `k` distinct
/// values is reported as [`Error::DegenerateClustering`].
pub fn kmeans_1d(points: &[f64], k: usize, rng: &mut Rng) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::domain(format!(
            "kmeans needs 1 <= k <= n, got k = {k}, n = {}",
            points.len()
        )));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("kmeans input".into()));
    }
    let mut distinct = points.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::DegenerateClustering {
            distinct: distinct.len(),
            k,
        });
    }

    let mut best: Option<KMeans> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus_init(points, k, rng);
        let run = lloyd(points, init);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn nearest(x: f64, centroids: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centroids.iter().enumerate() {
        let d = (x - c) * (x - c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[f64], k: usize, rng: &mut Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.below(points.len() as u64) as usize]);
    let mut d2: Vec<f64> = points.iter().map(|&x| (x - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.next_f64() * total;
        let mut acc = 0.0;
        // Fall back to the last point with positive weight if rounding leaves
        // `target` past the running sum.
        let mut pick = d2
            .iter()
            .rposition(|&d| d > 0.0)
            .expect("distinct values remain");
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = i;
                break;
            }
        }
        let c = points[pick];
        centroids.push(c);
        for (d, &x) in d2.iter_mut().zip(points) {
            *d = d.min((x - c) * (x - c));
        }
    }
    centroids
}

fn sse_of(points: &[f64], labels: &[usize], centroids: &[f64]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(&x, &l)| (x - centroids[l]).powi(2))
        .sum()
}

fn lloyd(points: &[f64], mut centroids: Vec<f64>) -> KMeans {
    let k = centroids.len();
    let mut labels = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        for (l, &x) in labels.iter_mut().zip(points) {
            *l = nearest(x, &centroids).0;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&l, &x) in labels.iter().zip(points) {
            sums[l] += x;
            counts[l] += 1;
        }
        let mut movement: f64 = 0.0;
        for j in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[j] > 0 {
                let c = sums[j] / counts[j] as f64;
                movement = movement.max((c - centroids[j]).abs());
                centroids[j] = c;
            }
        }
        iterations += 1;
        history.push(sse_of(points, &labels, &centroids));
        if movement < KMEANS_TOL {
            break;
        }
    }
    for (l, &x) in labels.iter_mut().zip(points) {
        *l = nearest(x, &centroids).0;
    }
    KMeans {
        sse: sse_of(points, &labels, &centroids),
        labels,
        centroids,
        sse_history: history,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster() {
        let r = kmeans_1d(&[5.0, 5.0, 5.0], 1, &mut Rng::new(1)).unwrap();
        assert_eq!(r.centroids, vec![5.0]);
        assert_eq!(r.sse, 0.0);
    }

    #[test]
    fn k_equals_n_gives_zero_sse() {
        let pts = [0.3, -1.0, 2.5, 7.0];
        let r = kmeans_1d(&pts, 4, &mut Rng::new(2)).unwrap();
        assert_eq!(r.sse, 0.0);
        let mut labels = r.labels.clone();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 4);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            kmeans_1d(&[1.0, 1.0, 2.0], 3, &mut Rng::new(0)),
            Err(Error::DegenerateClustering { distinct: 2, k: 3 })
        ));
        assert!(matches!(
            kmeans_1d(&[1.0], 2, &mut Rng::new(0)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            kmeans_1d(&[1.0], 0, &mut Rng::new(0)),
            Err(Error::Domain(_))
        ));
    }
}
