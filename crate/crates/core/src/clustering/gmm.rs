//! Diagonal Gaussian mixtures fitted by expectation maximization, with the
//! number of components picked by cross-validated log-likelihood.

use rand::seq::SliceRandom;
use rand::Rng;

use super::kmeans::{lloyd, relabel_order};

const MAX_ITER: usize = 100;
const TOLERANCE: f64 = 1e-6;
const FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussianMixture {
    fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        self.means[c]
            .iter()
            .zip(&self.variances[c])
            .zip(x)
            .map(|((m, v), x)| {
                -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m) * (x - m) / v)
            })
            .sum()
    }

    fn joint(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weights.len())
            .map(|c| self.weights[c].ln() + self.component_log_density(c, x))
            .collect()
    }

    pub fn log_likelihood(&self, points: &[&[f64]]) -> f64 {
        points.iter().map(|p| log_sum_exp(&self.joint(p))).sum()
    }

    /// Component with the largest posterior, ties to the lowest index.
    pub fn most_likely(&self, x: &[f64]) -> usize {
        let j = self.joint(x);
        let mut best = 0;
        for (c, v) in j.iter().enumerate() {
            if *v > j[best] {
                best = c;
            }
        }
        best
    }
}

fn floors(points: &[&[f64]]) -> Vec<f64> {
    let dims = points[0].len();
    let n = points.len() as f64;
    (0..dims)
        .map(|d| {
            let m = points.iter().map(|p| p[d]).sum::<f64>() / n;
            let v = points.iter().map(|p| (p[d] - m).powi(2)).sum::<f64>() / n;
            1e-6 * if v > 0.0 { v } else { 1.0 }
        })
        .collect()
}

pub(crate) fn fit<R: Rng>(
    points: &[&[f64]],
    k: usize,
    floor: &[f64],
    rng: &mut R,
) -> GaussianMixture {
    let n = points.len();
    let seeds: Vec<Vec<f64>> = rand::seq::index::sample(rng, n, k.min(n))
        .into_iter()
        .map(|i| points[i].to_vec())
        .collect();
    let (means, labels) = lloyd(points, seeds);
    let k = means.len();
    let dims = floor.len();
    let mut g = GaussianMixture {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![vec![0.0; dims]; k],
    };
    let mut resp: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| (0..k).map(|c| if c == *l { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..MAX_ITER {
        m_step(&mut g, points, &resp, floor);
        let mut ll = 0.0;
        for (r, p) in resp.iter_mut().zip(points) {
            let j = g.joint(p);
            let z = log_sum_exp(&j);
            ll += z;
            for (rc, jc) in r.iter_mut().zip(j) {
                *rc = (jc - z).exp();
            }
        }
        if ll - prev < TOLERANCE {
            break;
        }
        prev = ll;
    }
    g
}

fn m_step(g: &mut GaussianMixture, points: &[&[f64]], resp: &[Vec<f64>], floor: &[f64]) {
    let n = points.len() as f64;
    for c in 0..g.weights.len() {
        let nc: f64 = resp.iter().map(|r| r[c]).sum();
        g.weights[c] = (nc / n).max(f64::MIN_POSITIVE);
        if nc <= 0.0 {
            g.variances[c] = floor.iter().map(|f| f.max(1.0)).collect();
            continue;
        }
        for d in 0..floor.len() {
            let m = resp
                .iter()
                .zip(points)
                .map(|(r, p)| r[c] * p[d])
                .sum::<f64>()
                / nc;
            let v = resp
                .iter()
                .zip(points)
                .map(|(r, p)| r[c] * (p[d] - m).powi(2))
                .sum::<f64>()
                / nc;
            g.means[c][d] = m;
            g.variances[c][d] = v.max(floor[d]);
        }
    }
}

/// Held-out log-likelihood of a `k`-component fit averaged over folds.
fn cross_validated<R: Rng>(
    points: &[&[f64]],
    order: &[usize],
    k: usize,
    floor: &[f64],
    rng: &mut R,
) -> Option<f64> {
    let folds = FOLDS.min(points.len());
    let mut total = 0.0;
    for f in 0..folds {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (pos, i) in order.iter().enumerate() {
            if pos % folds == f {
                test.push(points[*i]);
            } else {
                train.push(points[*i]);
            }
        }
        if train.len() < k {
            return None;
        }
        total += fit(&train, k, floor, rng).log_likelihood(&test);
    }
    Some(total / folds as f64)
}

/// Fits mixtures of growing size until the cross-validated likelihood stops
/// improving; labels points by their most likely component.
pub(crate) fn em_cluster<R: Rng>(
    points: &[Vec<f64>],
    k_max: usize,
    rng: &mut R,
) -> (GaussianMixture, Vec<usize>) {
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let floor = floors(&refs);
    let mut k = 1;
    if refs.len() >= 2 {
        let mut order: Vec<usize> = (0..refs.len()).collect();
        order.shuffle(rng);
        let mut best = cross_validated(&refs, &order, 1, &floor, rng).unwrap_or(f64::NEG_INFINITY);
        for candidate in 2..=k_max {
            match cross_validated(&refs, &order, candidate, &floor, rng) {
                Some(score) if score > best => {
                    best = score;
                    k = candidate;
                }
                _ => break,
            }
        }
    }
    let g = fit(&refs, k, &floor, rng);
    let labels: Vec<usize> = refs.iter().map(|p| g.most_likely(p)).collect();
    let (order, labels) = relabel_order(&g.means, &labels);
    let total: f64 = order.iter().map(|c| g.weights[*c]).sum();
    let mixture = GaussianMixture {
        weights: order.iter().map(|c| g.weights[*c] / total).collect(),
        means: order.iter().map(|c| g.means[*c].clone()).collect(),
        variances: order.iter().map(|c| g.variances[*c].clone()).collect(),
    };
    (mixture, labels)
}
