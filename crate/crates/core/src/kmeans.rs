//! Lloyd's K-means with k-means++ seeding and single-point transfer refinement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;
/// Independent k-means++ restarts; the lowest-WCSS run is kept.
pub const DEFAULT_RESTARTS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Cluster index of every point.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// WCSS after every Lloyd iteration of the kept restart.
    pub history: Vec<f64>,
    /// WCSS histories of every restart, in restart order.
    pub all_histories: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn wcss(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let centroids = means(points, labels, k);
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| centroids[l].as_ref().map_or(0.0, |c| sq_dist(p, c)))
        .sum()
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Moves the point farthest from its centroid (in a cluster with more than
/// one member) into each empty cluster.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(&points[a], &centroids[labels[a]]);
                let db = sq_dist(&points[b], &centroids[labels[b]]);
                // first index wins ties
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .expect("k ≤ number of points leaves a multi-member cluster");
        let from = labels[donor];
        labels[donor] = empty;
        centroids[empty] = points[donor].clone();
        if let Some(m) = means(points, labels, k)[from].clone() {
            centroids[from] = m;
        }
    }
}

/// Hartigan refinement of a Lloyd fixed point: moves single points to
/// another cluster while that strictly lowers the WCSS. Lloyd steps alone
/// can stall in partitions that one transfer improves. Returns whether
/// anything moved.
fn transfer(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let mut moved = false;
    loop {
        let mut changed = false;
        for i in 0..points.len() {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let removal = na / (na - 1.0) * sq_dist(&points[i], &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let insertion = nb / (nb + 1.0) * sq_dist(&points[i], &centroids[b]);
                if insertion < removal * (1.0 - 1e-12) && best.map_or(true, |(_, c)| insertion < c) {
                    best = Some((b, insertion));
                }
            }
            if let Some((b, _)) = best {
                labels[i] = b;
                counts[a] -= 1;
                counts[b] += 1;
                for j in [a, b] {
                    if let Some(m) = means(points, labels, k)[j].clone() {
                        centroids[j] = m;
                    }
                }
                changed = true;
                moved = true;
            }
        }
        if !changed {
            return moved;
        }
    }
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>, usize) {
    let mut centroids = plus_plus_seed(points, k, rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        repair_empty(points, &mut labels, &mut centroids);
        for (j, m) in means(points, &labels, k).into_iter().enumerate() {
            if let Some(m) = m {
                centroids[j] = m;
            }
        }
        let current = wcss(points, &labels, k);
        if let Some(&prev) = history.last() {
            debug_assert!(
                current <= prev + 1e-9 * prev.max(1.0),
                "WCSS increased from {prev} to {current}"
            );
        }
        history.push(current);
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels && !transfer(points, &mut next, &mut centroids) {
            break;
        }
        if iterations >= MAX_ITERATIONS {
            break;
        }
        labels = next;
    }
    (labels, centroids, history, iterations)
}

/// Clusters `points` into `k` groups. Deterministic for a given seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::Contract(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("k-means points of unequal length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    let mut all_histories = Vec::new();
    for _ in 0..restarts.max(1) {
        let (labels, centroids, history, iterations) = lloyd(points, k, &mut rng);
        let w = *history.last().unwrap();
        all_histories.push(history.clone());
        if best.as_ref().map_or(true, |b| w < b.wcss) {
            best = Some(KMeansResult {
                labels,
                centroids,
                wcss: w,
                history,
                all_histories: Vec::new(),
                iterations,
            });
        }
    }
    let mut best = best.unwrap();
    best.all_histories = all_histories;
    Ok(best)
}
