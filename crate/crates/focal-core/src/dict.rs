//! Per-image dictionary: the flattened feature rows of one image split into
//! a pristine pool (queries and positive keys) and a forged pool (negative
//! keys) according to the ground-truth mask.

use crate::tensor::{FeatureMatrix, ForgeryMask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    positives: FeatureMatrix,
    negatives: FeatureMatrix,
    positive_indices: Vec<usize>,
    negative_indices: Vec<usize>,
}

impl Dictionary {
    /// Assembles a dictionary from explicit pools; row indices are taken to
    /// be positives-then-negatives. Mainly for tests and ablations.
    pub fn from_parts(positives: FeatureMatrix, negatives: FeatureMatrix) -> Result<Self> {
        if positives.rows() > 0 && negatives.rows() > 0 && positives.cols() != negatives.cols() {
            return Err(Error::Dimension(format!(
                "positive cols {} != negative cols {}",
                positives.cols(),
                negatives.cols()
            )));
        }
        let positive_indices = (0..positives.rows()).collect();
        let negative_indices = (positives.rows()..positives.rows() + negatives.rows()).collect();
        Ok(Self {
            positives,
            negatives,
            positive_indices,
            negative_indices,
        })
    }

    /// Pristine rows; every one of them serves as a query in turn.
    pub fn positives(&self) -> &FeatureMatrix {
        &self.positives
    }

    /// Forged rows.
    pub fn negatives(&self) -> &FeatureMatrix {
        &self.negatives
    }

    /// Raster indices of the positive rows in the source grid.
    pub fn positive_indices(&self) -> &[usize] {
        &self.positive_indices
    }

    /// Raster indices of the negative rows in the source grid.
    pub fn negative_indices(&self) -> &[usize] {
        &self.negative_indices
    }
}

/// Splits flattened feature rows by mask value, preserving raster order on
/// both sides: rows where the mask is 0 become positives, rows where it is 1
/// become negatives.
pub fn build_dictionary(features: &FeatureMatrix, mask: &ForgeryMask) -> Result<Dictionary> {
    let cells = mask.height() * mask.width();
    if features.rows() != cells {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {}x{} mask",
            features.rows(),
            mask.height(),
            mask.width()
        )));
    }
    let cols = features.cols();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for (r, &m) in mask.data().iter().enumerate() {
        if m == 0 {
            pos.extend_from_slice(features.row(r));
            pos_idx.push(r);
        } else {
            neg.extend_from_slice(features.row(r));
            neg_idx.push(r);
        }
    }
    Ok(Dictionary {
        positives: FeatureMatrix::new(pos_idx.len(), cols, pos)?,
        negatives: FeatureMatrix::new(neg_idx.len(), cols, neg)?,
        positive_indices: pos_idx,
        negative_indices: neg_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureMatrix;

    fn grid_features(rows: usize, cols: usize) -> FeatureMatrix {
        let data = (0..rows * cols).map(|v| v as f32).collect();
        FeatureMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn partition_counts_follow_mask() {
        let features = grid_features(4, 2);
        let mask = ForgeryMask::new(2, 2, vec![0, 0, 0, 1]).unwrap();
        let d = build_dictionary(&features, &mask).unwrap();
        assert_eq!(d.positives().rows(), 3);
        assert_eq!(d.negatives().rows(), 1);
        assert_eq!(d.negatives().row(0), features.row(3));
        assert_eq!(d.positive_indices(), &[0, 1, 2]);
        assert_eq!(d.negative_indices(), &[3]);
    }

    #[test]
    fn all_zero_mask_means_no_negatives() {
        let features = grid_features(6, 3);
        let mask = ForgeryMask::new(2, 3, vec![0; 6]).unwrap();
        let d = build_dictionary(&features, &mask).unwrap();
        assert_eq!(d.negatives().rows(), 0);
        assert_eq!(d.positives().rows(), 6);
    }

    #[test]
    fn partition_is_exact_and_disjoint() {
        // Pseudo-random mask; union of sides must be all rows, disjointly.
        let rows = 35;
        let features = grid_features(rows, 2);
        let mask_data: Vec<u8> = (0..rows).map(|i| ((i * 7 + 3) % 5 == 0) as u8).collect();
        let mask = ForgeryMask::new(5, 7, mask_data.clone()).unwrap();
        let d = build_dictionary(&features, &mask).unwrap();
        assert_eq!(d.positives().rows() + d.negatives().rows(), rows);
        let mut seen = vec![false; rows];
        for &i in d.positive_indices() {
            assert_eq!(mask_data[i], 0);
            assert!(!seen[i]);
            seen[i] = true;
        }
        for &i in d.negative_indices() {
            assert_eq!(mask_data[i], 1);
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
        // Raster order preserved within each side.
        assert!(d.positive_indices().windows(2).all(|w| w[0] < w[1]));
        assert!(d.negative_indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let features = grid_features(4, 2);
        let mask = ForgeryMask::new(2, 3, vec![0; 6]).unwrap();
        assert!(matches!(
            build_dictionary(&features, &mask),
            Err(Error::Dimension(_))
        ));
    }
}
