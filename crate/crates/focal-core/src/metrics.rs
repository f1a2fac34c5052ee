//! Exact evaluation: per-class confusion counts, macro-averaged F1 over the
//! {pristine, forged} classes, and forged-class IoU.

use crate::tensor::ForgeryMask;
use crate::{Error, Result};

/// TP/FP/FN for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Counts for both classes; "forged" treats 1-pixels as positives,
/// "pristine" treats 0-pixels as positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub forged: ClassCounts,
    pub pristine: ClassCounts,
}

fn check_dims(p: &ForgeryMask, y: &ForgeryMask) -> Result<()> {
    if p.height() != y.height() || p.width() != y.width() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            p.height(),
            p.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Exhaustive pixel count of both classes' confusion entries.
pub fn confusion(p: &ForgeryMask, y: &ForgeryMask) -> Result<ConfusionCounts> {
    check_dims(p, y)?;
    let mut forged = ClassCounts::default();
    let mut pristine = ClassCounts::default();
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        match (pv, yv) {
            (1, 1) => forged.tp += 1,
            (1, 0) => {
                forged.fp += 1;
                pristine.fn_ += 1;
            }
            (0, 1) => {
                forged.fn_ += 1;
                pristine.fp += 1;
            }
            _ => pristine.tp += 1,
        }
    }
    Ok(ConfusionCounts { forged, pristine })
}

fn class_f1(c: &ClassCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        // Class absent from both masks: a correct "nothing" scores 1.
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// Mean of the two per-class F1 scores.
pub fn macro_f1(p: &ForgeryMask, y: &ForgeryMask) -> Result<f64> {
    let c = confusion(p, y)?;
    Ok(0.5 * (class_f1(&c.forged) + class_f1(&c.pristine)))
}

/// Forged-pixel intersection over union; an empty union (both masks
/// all-pristine) scores 1.
pub fn iou(p: &ForgeryMask, y: &ForgeryMask) -> Result<f64> {
    let c = confusion(p, y)?;
    let union = c.forged.tp + c.forged.fp + c.forged.fn_;
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(c.forged.tp as f64 / union as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetReport {
    /// (macro F1, IoU) per input pair, in input order.
    pub per_sample: Vec<(f64, f64)>,
    pub mean_f1: f64,
    pub mean_iou: f64,
}

/// Scores every (prediction, ground truth) pair and the dataset means.
/// A dimension mismatch reports which pair is at fault.
pub fn evaluate_dataset(pairs: &[(ForgeryMask, ForgeryMask)]) -> Result<DatasetReport> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no mask pairs to evaluate".into()));
    }
    let mut per_sample = Vec::with_capacity(pairs.len());
    let mut sum_f1 = 0.0f64;
    let mut sum_iou = 0.0f64;
    for (i, (p, y)) in pairs.iter().enumerate() {
        check_dims(p, y).map_err(|e| Error::Dimension(format!("pair {i}: {e}")))?;
        let f1 = macro_f1(p, y)?;
        let jac = iou(p, y)?;
        sum_f1 += f1;
        sum_iou += jac;
        per_sample.push((f1, jac));
    }
    Ok(DatasetReport {
        mean_f1: sum_f1 / pairs.len() as f64,
        mean_iou: sum_iou / pairs.len() as f64,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, data: Vec<u8>) -> ForgeryMask {
        ForgeryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn identical_masks_are_perfect() {
        let y = mask(2, 2, vec![1, 0, 0, 1]);
        let c = confusion(&y, &y).unwrap();
        assert_eq!(c.forged.fp, 0);
        assert_eq!(c.forged.fn_, 0);
        assert_eq!(c.pristine.fp, 0);
        assert_eq!(macro_f1(&y, &y).unwrap(), 1.0);
        assert_eq!(iou(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn hand_enumerated_confusion() {
        // p = [[1,0],[0,0]], y = [[1,1],[0,0]]:
        //   forged: TP=1 FP=0 FN=1; pristine: TP=2 FP=1 FN=0.
        let p = mask(2, 2, vec![1, 0, 0, 0]);
        let y = mask(2, 2, vec![1, 1, 0, 0]);
        let c = confusion(&p, &y).unwrap();
        assert_eq!((c.forged.tp, c.forged.fp, c.forged.fn_), (1, 0, 1));
        assert_eq!((c.pristine.tp, c.pristine.fp, c.pristine.fn_), (2, 1, 0));
        // Macro F1 = (2/3 + 4/5)/2 = 11/15; IoU = 1/2.
        assert!((macro_f1(&p, &y).unwrap() - 11.0 / 15.0).abs() < 1e-15);
        assert_eq!(iou(&p, &y).unwrap(), 0.5);
    }

    #[test]
    fn complement_prediction_scores_zero() {
        let y = mask(2, 2, vec![1, 1, 0, 0]);
        let p = mask(2, 2, vec![0, 0, 1, 1]);
        let c = confusion(&p, &y).unwrap();
        assert_eq!(c.forged.tp, 0);
        assert_eq!(c.pristine.tp, 0);
        assert_eq!(macro_f1(&p, &y).unwrap(), 0.0);
        assert_eq!(iou(&p, &y).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_forged_sets_have_zero_iou() {
        let p = mask(1, 4, vec![1, 1, 0, 0]);
        let y = mask(1, 4, vec![0, 0, 1, 1]);
        assert_eq!(iou(&p, &y).unwrap(), 0.0);
    }

    #[test]
    fn all_pristine_pair_scores_one() {
        let p = mask(2, 2, vec![0; 4]);
        let y = mask(2, 2, vec![0; 4]);
        assert_eq!(macro_f1(&p, &y).unwrap(), 1.0);
        assert_eq!(iou(&p, &y).unwrap(), 1.0);
    }

    #[test]
    fn dataset_means_are_exact() {
        let perfect = (mask(1, 2, vec![1, 0]), mask(1, 2, vec![1, 0]));
        let wrong = (mask(1, 2, vec![0, 1]), mask(1, 2, vec![1, 0]));
        let report = evaluate_dataset(&[perfect.clone(), wrong]).unwrap();
        assert_eq!(report.per_sample[0], (1.0, 1.0));
        assert_eq!(report.per_sample[1], (0.0, 0.0));
        assert_eq!(report.mean_f1, 0.5);
        assert_eq!(report.mean_iou, 0.5);
        let single = evaluate_dataset(&[perfect]).unwrap();
        assert_eq!(single.mean_f1, single.per_sample[0].0);
    }

    #[test]
    fn mismatched_pair_is_identified() {
        let good = (mask(1, 2, vec![1, 0]), mask(1, 2, vec![1, 0]));
        let bad = (mask(1, 2, vec![1, 0]), mask(2, 1, vec![1, 0]));
        let err = evaluate_dataset(&[good, bad]).unwrap_err();
        assert!(err.to_string().contains("pair 1"), "{err}");
    }

    #[test]
    fn spatial_permutation_invariance() {
        let p = mask(2, 3, vec![1, 0, 1, 0, 0, 1]);
        let y = mask(2, 3, vec![1, 1, 0, 0, 0, 1]);
        // Reverse both masks identically.
        let rp = mask(2, 3, p.data().iter().rev().copied().collect());
        let ry = mask(2, 3, y.data().iter().rev().copied().collect());
        assert_eq!(macro_f1(&p, &y).unwrap(), macro_f1(&rp, &ry).unwrap());
        assert_eq!(iou(&p, &y).unwrap(), iou(&rp, &ry).unwrap());
    }

    #[test]
    fn dice_jaccard_identity_holds() {
        // IoU = F1_forged / (2 - F1_forged) for any pair with a nonempty
        // union, and both are 1 on the empty-union case.
        let cases = [
            (vec![1, 0, 0, 0], vec![1, 1, 0, 0]),
            (vec![1, 1, 1, 0], vec![0, 1, 1, 1]),
            (vec![0, 0, 0, 0], vec![0, 0, 0, 0]),
            (vec![1, 1, 1, 1], vec![1, 1, 1, 1]),
        ];
        for (pd, yd) in cases {
            let p = mask(2, 2, pd);
            let y = mask(2, 2, yd);
            let c = confusion(&p, &y).unwrap();
            let f1_forged = class_f1(&c.forged);
            let lhs = iou(&p, &y).unwrap();
            let rhs = f1_forged / (2.0 - f1_forged);
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn confusion_counts_cover_every_pixel() {
        let p = mask(3, 3, vec![1, 0, 1, 0, 0, 1, 0, 1, 0]);
        let y = mask(3, 3, vec![1, 1, 0, 0, 1, 1, 0, 0, 0]);
        let c = confusion(&p, &y).unwrap();
        // TP_f + FP_f + FN_f + TP_p == total pixels (TN of forged is TP of
        // pristine).
        let total = c.forged.tp + c.forged.fp + c.forged.fn_ + c.pristine.tp;
        assert_eq!(total, 9);
        // TP_f + FN_f equals the ground-truth forged count.
        assert_eq!(c.forged.tp + c.forged.fn_, y.forged_count() as u64);
    }
}
