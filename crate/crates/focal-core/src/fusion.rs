//! Feature-level fusion of two extractors' outputs: align resolutions,
//! optionally give each source unit row norms, concatenate channels. No
//! retraining is involved.

use crate::loss::NORMALIZE_EPS;
use crate::tensor::{
    flatten_features, l2_normalize_rows, resize_bilinear, unflatten_features, FeatureMap,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSpec {
    /// L2-normalize each source's rows before concatenation so both
    /// extractors weigh equally in the clustering metric.
    pub normalize: bool,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self { normalize: true }
    }
}

fn align(f: &FeatureMap, target_h: usize, target_w: usize, normalize: bool) -> FeatureMap {
    let resized = if f.height() == target_h && f.width() == target_w {
        f.clone()
    } else {
        resize_bilinear(f, target_h, target_w)
    };
    if normalize {
        let rows = l2_normalize_rows(&flatten_features(&resized), NORMALIZE_EPS);
        unflatten_features(&rows, target_h, target_w).expect("shape preserved")
    } else {
        resized
    }
}

/// Fuses two maps: the lower-resolution one is upsampled bilinearly to the
/// higher resolution, then channels are concatenated first-then-second.
pub fn fuse(a: &FeatureMap, b: &FeatureMap, spec: &FusionSpec) -> FeatureMap {
    let th = a.height().max(b.height());
    let tw = a.width().max(b.width());
    let a = align(a, th, tw, spec.normalize);
    let b = align(b, th, tw, spec.normalize);
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(th * tw * (ca + cb));
    for i in 0..th {
        for j in 0..tw {
            for c in 0..ca {
                data.push(a.at(i, j, c));
            }
            for c in 0..cb {
                data.push(b.at(i, j, c));
            }
        }
    }
    FeatureMap::new(th, tw, ca + cb, data).expect("finite inputs")
}
