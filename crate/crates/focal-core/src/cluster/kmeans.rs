//! Lloyd's algorithm with seeded k-means++ initialization; the fixed-k
//! baseline against the density path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClusterLabels;
use crate::tensor::FeatureMatrix;
use crate::{Error, Result};

const MAX_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-6;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn kmeans_pp_init(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(rows[rng.gen_range(0..n)].clone());
    let mut best = vec![f64::INFINITY; n];
    while centroids.len() < k {
        let last = centroids.last().unwrap();
        let mut total = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let d = dist2(row, last);
            if d < best[i] {
                best[i] = d;
            }
            total += best[i];
        }
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(rows[next].clone());
    }
    centroids
}

/// Clusters into exactly `k` groups (no noise label). Deterministic in the
/// seed; stops after 100 iterations or when every centroid moves less than
/// 1e-6.
pub fn kmeans(points: &FeatureMatrix, k: usize, seed: u64) -> Result<ClusterLabels> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points for k={k}")));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|r| points.row(r).iter().map(|&v| v as f64).collect())
        .collect();
    let cols = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&rows, k, &mut rng);
    let mut assign = vec![0usize; n];

    for _ in 0..MAX_ITERS {
        for (i, row) in rows.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist2(row, centroid);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = vec![vec![0.0f64; cols]; k];
        let mut counts = vec![0usize; k];
        for (row, &c) in rows.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // keep the old centroid for empty clusters
            }
            let inv = 1.0 / counts[c] as f64;
            let mut move2 = 0.0;
            for (s, old) in sums[c].iter().zip(&centroids[c]) {
                let nv = s * inv;
                let d = nv - old;
                move2 += d * d;
            }
            shift = shift.max(move2.sqrt());
            for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                *dst = s * inv;
            }
        }
        if shift < SHIFT_TOL {
            break;
        }
    }

    // Contiguous labels even if some centroid ended up empty.
    let mut used = vec![false; k];
    for &c in &assign {
        used[c] = true;
    }
    let mut remap = vec![0i32; k];
    let mut next = 0i32;
    for c in 0..k {
        if used[c] {
            remap[c] = next;
            next += 1;
        }
    }
    let labels = assign.iter().map(|&c| remap[c]).collect();
    Ok(ClusterLabels::new(labels, next as usize))
}
