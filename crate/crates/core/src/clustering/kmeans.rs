//! X-means: k-means that grows k by splitting centroids while the Bayesian
//! information criterion improves.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{nearest, sq_dist};

const MAX_ITER: usize = 100;
const VARIANCE_FLOOR: f64 = 1e-12;

pub(crate) fn lloyd(
    points: &[&[f64]],
    mut centroids: Vec<Vec<f64>>,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dims = centroids.first().map_or(0, Vec::len);
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let c = nearest(&centroids, p);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dims]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (l, p) in labels.iter().zip(points) {
            counts[*l] += 1;
            for (s, x) in sums[*l].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    (centroids, labels)
}

/// BIC of a hard partition under Gaussians sharing one full covariance.
/// `resolution[d]` is added to the diagonal.
pub(crate) fn bic(
    points: &[&[f64]],
    centroids: &[Vec<f64>],
    labels: &[usize],
    resolution: &[f64],
) -> f64 {
    let r = points.len() as f64;
    let k = centroids.len() as f64;
    let m = resolution.len();
    if r <= k {
        return f64::NEG_INFINITY;
    }
    let mut scatter = DMatrix::<f64>::zeros(m, m);
    let mut sizes = vec![0.0; centroids.len()];
    for (p, l) in points.iter().zip(labels) {
        sizes[*l] += 1.0;
        let x = DVector::from_iterator(m, p.iter().zip(&centroids[*l]).map(|(a, b)| a - b));
        scatter += &x * x.transpose();
    }
    let mut cov = &scatter / (r - k);
    for (d, h) in resolution.iter().enumerate() {
        cov[(d, d)] = (cov[(d, d)] + h).max(VARIANCE_FLOOR);
    }
    let Some(chol) = cov.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let fit = chol.inverse().component_mul(&scatter).sum();
    let ll = sizes
        .iter()
        .filter(|n| **n > 0.0)
        .map(|&n: &f64| n * (n / r).ln())
        .sum::<f64>()
        - r / 2.0 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det)
        - fit / 2.0;
    let params = (k - 1.0) + m as f64 * k + (m * (m + 1) / 2) as f64;
    ll - params / 2.0 * r.ln()
}

fn mean(points: &[&[f64]]) -> Vec<f64> {
    let dims = points[0].len();
    let mut m = vec![0.0; dims];
    for p in points {
        for (a, x) in m.iter_mut().zip(p.iter()) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= points.len() as f64);
    m
}

/// Variance of rounding each coordinate to the data's own grid: h²/12 per
/// dimension, where h is the smallest gap between distinct values.
pub(crate) fn resolution_variance(points: &[Vec<f64>]) -> Vec<f64> {
    let dims = points.first().map_or(0, Vec::len);
    (0..dims)
        .map(|d| {
            let mut v: Vec<f64> = points.iter().map(|p| p[d]).collect();
            v.sort_by(f64::total_cmp);
            let h = v
                .windows(2)
                .map(|w| w[1] - w[0])
                .filter(|g| *g > 0.0)
                .fold(f64::INFINITY, f64::min);
            if h.is_finite() {
                h * h / 12.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Tries to split one cluster in two; returns the children and the BIC gain.
fn try_split<R: Rng>(
    points: &[&[f64]],
    centroid: &[f64],
    resolution: &[f64],
    rng: &mut R,
) -> Option<(Vec<Vec<f64>>, f64)> {
    if points.len() < 2 {
        return None;
    }
    let spread =
        (points.iter().map(|p| sq_dist(p, centroid)).sum::<f64>() / points.len() as f64).sqrt();
    if spread <= 0.0 {
        return None;
    }
    let mut dir: Vec<f64> = centroid.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
    dir.iter_mut().for_each(|d| *d *= spread / norm);
    let children = vec![
        centroid.iter().zip(&dir).map(|(c, d)| c + d).collect(),
        centroid.iter().zip(&dir).map(|(c, d)| c - d).collect(),
    ];
    let (children, labels) = lloyd(points, children);
    if !(labels.contains(&0) && labels.contains(&1)) {
        return None;
    }
    let parent = bic(
        points,
        &[centroid.to_vec()],
        &vec![0; points.len()],
        resolution,
    );
    let split = bic(points, &children, &labels, resolution);
    (split > parent).then_some((children, split - parent))
}

/// Returns centroids sorted lexicographically and each point's label.
pub(crate) fn xmeans<R: Rng>(
    points: &[Vec<f64>],
    k_max: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let resolution = resolution_variance(points);
    let mut centroids = vec![mean(&refs)];
    let mut labels = vec![0; points.len()];
    while centroids.len() < k_max {
        (centroids, labels) = lloyd(&refs, centroids);
        let mut candidates = Vec::new();
        for (c, centroid) in centroids.iter().enumerate() {
            let members: Vec<&[f64]> = refs
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == c)
                .map(|(p, _)| *p)
                .collect();
            if let Some((children, gain)) = try_split(&members, centroid, &resolution, rng) {
                candidates.push((gain, c, children));
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let room = k_max - centroids.len();
        let mut next: Vec<Option<Vec<f64>>> = centroids.into_iter().map(Some).collect();
        let mut added = Vec::new();
        for (_, c, mut children) in candidates.into_iter().take(room) {
            let second = children.pop().expect("two children");
            next[c] = children.pop();
            added.push(second);
        }
        centroids = next.into_iter().flatten().chain(added).collect();
    }
    (centroids, labels) = lloyd(&refs, centroids);
    relabel(centroids, &labels)
}

/// Drops empty clusters and numbers the rest in lexicographic centroid order.
pub(crate) fn relabel(centroids: Vec<Vec<f64>>, labels: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let (order, labels) = relabel_order(&centroids, labels);
    (
        order.iter().map(|c| centroids[*c].clone()).collect(),
        labels,
    )
}

/// Old indices of the kept clusters in their new order, and the new labels.
pub(crate) fn relabel_order(centroids: &[Vec<f64>], labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut used: Vec<usize> = (0..centroids.len())
        .filter(|c| labels.contains(c))
        .collect();
    used.sort_by(|a, b| {
        centroids[*a]
            .iter()
            .zip(&centroids[*b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(a.cmp(b))
    });
    let mut map = vec![usize::MAX; centroids.len()];
    for (new, old) in used.iter().enumerate() {
        map[*old] = new;
    }
    let labels = labels.iter().map(|l| map[*l]).collect();
    (used, labels)
}
