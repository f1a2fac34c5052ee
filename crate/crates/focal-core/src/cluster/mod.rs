//! Unsupervised inference: cluster the (normalized) feature rows of a test
//! image, call the biggest cluster pristine and everything else forged.

mod hdbscan;
mod kmeans;

pub use hdbscan::{core_distances, hdbscan, mst_mutual_reachability, CondensedNode, MstEdge};
pub use kmeans::kmeans;

use crate::loss::NORMALIZE_EPS;
use crate::tensor::{l2_normalize_rows, FeatureMap, FeatureMatrix, ForgeryMask};
use crate::{Error, Result};

/// Sentinel label for points no selected cluster claims.
pub const NOISE: i32 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    /// Smallest point count a cluster may have.
    pub min_cluster_size: usize,
    /// k for the core-distance density estimate.
    pub min_samples: usize,
    /// Cluster every `stride`-th grid cell per axis (1 = all cells).
    pub stride: usize,
    /// Seed for the K-means path; the density path is seed-free.
    pub seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 64,
            min_samples: 8,
            stride: 1,
            seed: 0,
        }
    }
}

impl ClusterParams {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 {
            return Err(Error::Config("min_cluster_size must be >= 2".into()));
        }
        if self.min_samples < 1 || self.stride < 1 {
            return Err(Error::Config("min_samples and stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-point assignment: contiguous cluster ids `0..m` plus [`NOISE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabels {
    labels: Vec<i32>,
    n_clusters: usize,
}

impl ClusterLabels {
    pub fn new(labels: Vec<i32>, n_clusters: usize) -> Self {
        debug_assert!(labels
            .iter()
            .all(|&l| l == NOISE || (0..n_clusters as i32).contains(&l)));
        Self { labels, n_clusters }
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterAlgo {
    Hdbscan,
    Kmeans,
}

/// Replaces each noise label by the label of its nearest non-noise point in
/// feature space (ties to the lowest index). All-noise input is returned
/// unchanged.
pub fn resolve_noise(labels: &ClusterLabels, points: &FeatureMatrix) -> Result<ClusterLabels> {
    if labels.len() != points.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} points",
            labels.len(),
            points.rows()
        )));
    }
    if !labels.labels.iter().any(|&l| l != NOISE) {
        return Ok(labels.clone());
    }
    let mut out = labels.labels.clone();
    for i in 0..out.len() {
        if out[i] != NOISE {
            continue;
        }
        let a = points.row(i);
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, &l) in labels.labels.iter().enumerate() {
            if l == NOISE {
                continue;
            }
            let d: f64 = a
                .iter()
                .zip(points.row(j))
                .map(|(x, y)| {
                    let d = *x as f64 - *y as f64;
                    d * d
                })
                .sum();
            if (d, j) < best {
                best = (d, j);
            }
        }
        out[i] = labels.labels[best.1];
    }
    Ok(ClusterLabels::new(out, labels.n_clusters))
}

/// Maps labels on the (possibly strided) grid to a full-resolution mask: the
/// cluster with the most members becomes pristine (0), every other cluster
/// forged (1). Size ties go to the cluster holding the lowest raster index;
/// labels that are still noise (all-noise input) map to pristine. Strided
/// grids are upsampled by nearest-cell replication.
pub fn labels_to_mask(
    labels: &ClusterLabels,
    grid_h: usize,
    grid_w: usize,
    stride: usize,
) -> Result<ForgeryMask> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let sub_h = grid_h.div_ceil(stride);
    let sub_w = grid_w.div_ceil(stride);
    if labels.len() != sub_h * sub_w {
        return Err(Error::Dimension(format!(
            "{} labels for {sub_h}x{sub_w} strided grid",
            labels.len()
        )));
    }

    let mut winner = None;
    if labels.n_clusters() > 0 {
        let mut count = vec![0usize; labels.n_clusters()];
        let mut first = vec![usize::MAX; labels.n_clusters()];
        for (i, &l) in labels.labels().iter().enumerate() {
            if l >= 0 {
                count[l as usize] += 1;
                if first[l as usize] == usize::MAX {
                    first[l as usize] = i;
                }
            }
        }
        winner = (0..labels.n_clusters())
            .max_by_key(|&c| (count[c], std::cmp::Reverse(first[c])))
            .map(|c| c as i32);
    }

    let sub: Vec<u8> = labels
        .labels()
        .iter()
        .map(|&l| match winner {
            Some(w) => u8::from(l != w && l != NOISE),
            None => 0,
        })
        .collect();

    let mut data = vec![0u8; grid_h * grid_w];
    for i in 0..grid_h {
        for j in 0..grid_w {
            data[i * grid_w + j] = sub[(i / stride) * sub_w + j / stride];
        }
    }
    ForgeryMask::new(grid_h, grid_w, data)
}

/// Flattens every `stride`-th cell (both axes) into rows, raster order.
pub(crate) fn subsample_rows(f: &FeatureMap, stride: usize) -> FeatureMatrix {
    if stride <= 1 {
        return crate::tensor::flatten_features(f);
    }
    let (h, w, c) = (f.height(), f.width(), f.channels());
    let sub_h = h.div_ceil(stride);
    let sub_w = w.div_ceil(stride);
    let mut data = Vec::with_capacity(sub_h * sub_w * c);
    for i in (0..h).step_by(stride) {
        for j in (0..w).step_by(stride) {
            for ch in 0..c {
                data.push(f.at(i, j, ch));
            }
        }
    }
    FeatureMatrix::new(sub_h * sub_w, c, data).expect("consistent by construction")
}

/// Density-clustering inference: normalize rows, cluster, map the largest
/// cluster to pristine. Pure function of its inputs; no trained state.
pub fn predict_mask(f: &FeatureMap, params: &ClusterParams) -> Result<ForgeryMask> {
    predict_mask_with(f, params, ClusterAlgo::Hdbscan)
}

/// Same inference with a selectable clustering backend.
pub fn predict_mask_with(
    f: &FeatureMap,
    params: &ClusterParams,
    algo: ClusterAlgo,
) -> Result<ForgeryMask> {
    let rows = l2_normalize_rows(&subsample_rows(f, params.stride), NORMALIZE_EPS);
    let labels = match algo {
        ClusterAlgo::Hdbscan => {
            let raw = hdbscan(&rows, params)?;
            resolve_noise(&raw, &rows)?
        }
        ClusterAlgo::Kmeans => kmeans(&rows, 2, params.seed)?,
    };
    labels_to_mask(&labels, f.height(), f.width(), params.stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: Vec<i32>) -> ClusterLabels {
        let m = v.iter().copied().max().unwrap_or(NOISE);
        ClusterLabels::new(v, (m + 1).max(0) as usize)
    }

    #[test]
    fn single_cluster_maps_to_all_pristine() {
        let l = labels(vec![0; 9]);
        let mask = labels_to_mask(&l, 3, 3, 1).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn minority_clusters_all_become_forged() {
        // Sizes {100, 20, 5}: cluster 0 is pristine, 1 and 2 forged.
        let mut v = vec![0i32; 100];
        v.extend(vec![1i32; 20]);
        v.extend(vec![2i32; 5]);
        let l = labels(v);
        let mask = labels_to_mask(&l, 25, 5, 1).unwrap();
        let forged = mask.forged_count();
        assert_eq!(forged, 25);
        assert!(mask.data()[..100].iter().all(|&b| b == 0));
        assert!(mask.data()[100..].iter().all(|&b| b == 1));
    }

    #[test]
    fn all_noise_maps_to_all_pristine() {
        let l = ClusterLabels::new(vec![NOISE; 6], 0);
        let mask = labels_to_mask(&l, 2, 3, 1).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn size_tie_breaks_to_lowest_raster_index() {
        // Two clusters of equal size; the one appearing first wins pristine.
        let l = labels(vec![1, 1, 0, 0]);
        let mask = labels_to_mask(&l, 2, 2, 1).unwrap();
        assert_eq!(mask.data(), &[0, 0, 1, 1]);
    }

    #[test]
    fn stride_upsampling_replicates_cells() {
        let l = labels(vec![0, 1, 0, 0]); // 2x2 strided grid
        let mask = labels_to_mask(&l, 4, 4, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = u8::from(i < 2 && j >= 2);
                assert_eq!(mask.at(i, j), expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn label_length_mismatch_rejected() {
        let l = labels(vec![0, 0, 0]);
        assert!(labels_to_mask(&l, 2, 2, 1).is_err());
    }

    #[test]
    fn noise_inherits_nearest_label() {
        let points = FeatureMatrix::new(
            4,
            1,
            vec![0.0, 0.1, 10.0, 10.2],
        )
        .unwrap();
        let l = ClusterLabels::new(vec![0, NOISE, 1, NOISE], 2);
        let resolved = resolve_noise(&l, &points).unwrap();
        assert_eq!(resolved.labels(), &[0, 0, 1, 1]);
    }

    #[test]
    fn all_noise_resolution_is_identity() {
        let points = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        let l = ClusterLabels::new(vec![NOISE, NOISE], 0);
        assert_eq!(resolve_noise(&l, &points).unwrap(), l);
    }

    fn square_fixture(seed: u64) -> (FeatureMap, ForgeryMask) {
        // Background rows near one direction, a square block near another.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = (12, 12, 4);
        let mut data = vec![0.0f32; h * w * c];
        let mut truth = vec![0u8; h * w];
        for i in 0..h {
            for j in 0..w {
                let forged = (3..6).contains(&i) && (4..8).contains(&j);
                let base: [f32; 4] = if forged {
                    [0.0, 1.0, 0.0, 0.0]
                } else {
                    [1.0, 0.0, 0.0, 0.0]
                };
                for ch in 0..c {
                    data[(i * w + j) * c + ch] = base[ch] + rng.gen_range(-0.05..0.05);
                }
                truth[i * w + j] = forged as u8;
            }
        }
        (
            FeatureMap::new(h, w, c, data).unwrap(),
            ForgeryMask::new(h, w, truth).unwrap(),
        )
    }

    #[test]
    fn predicts_square_region() {
        let (f, truth) = square_fixture(41);
        let params = ClusterParams {
            min_cluster_size: 6,
            min_samples: 3,
            ..Default::default()
        };
        let mask = predict_mask(&f, &params).unwrap();
        assert_eq!(mask, truth);
    }

    #[test]
    fn constant_map_is_all_pristine() {
        let f = FeatureMap::new(6, 6, 3, vec![0.25; 6 * 6 * 3]).unwrap();
        let params = ClusterParams {
            min_cluster_size: 4,
            min_samples: 2,
            ..Default::default()
        };
        let mask = predict_mask(&f, &params).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn channel_permutation_keeps_mask() {
        let (f, _) = square_fixture(43);
        let (h, w, c) = (f.height(), f.width(), f.channels());
        let mut permuted = vec![0.0f32; h * w * c];
        let perm = [2usize, 0, 3, 1];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    permuted[(i * w + j) * c + perm[ch]] = f.at(i, j, ch);
                }
            }
        }
        let g = FeatureMap::new(h, w, c, permuted).unwrap();
        let params = ClusterParams {
            min_cluster_size: 6,
            min_samples: 3,
            ..Default::default()
        };
        assert_eq!(
            predict_mask(&f, &params).unwrap(),
            predict_mask(&g, &params).unwrap()
        );
    }

    #[test]
    fn strided_prediction_matches_geometry() {
        // Stride 2 keeps every other cell: 36 of 144 points, of which the
        // forged block contributes only a couple; with min_cluster_size
        // above that the block dissolves into noise and resolves to the
        // background, but the bulk of the image must still be labeled
        // correctly.
        let (f, truth) = square_fixture(47);
        let params = ClusterParams {
            min_cluster_size: 10,
            min_samples: 3,
            stride: 2,
            ..Default::default()
        };
        let mask = predict_mask(&f, &params).unwrap();
        let agree = mask
            .data()
            .iter()
            .zip(truth.data())
            .filter(|(a, b)| a == b)
            .count();
        assert!(
            agree as f64 >= 0.8 * truth.data().len() as f64,
            "agreement {agree}/{}",
            truth.data().len()
        );
    }

    #[test]
    fn kmeans_path_emits_at_most_two_regions() {
        let (f, _) = square_fixture(53);
        let params = ClusterParams {
            seed: 7,
            ..Default::default()
        };
        let mask = predict_mask_with(&f, &params, ClusterAlgo::Kmeans).unwrap();
        assert!(mask.data().iter().all(|&v| v <= 1));
    }
}
