//! Classification metrics: accuracy, F1, and Matthews correlation, computed
//! from a 2x2 confusion table with SZ (label 1) as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{CamfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Tabulates predictions against labels (both 0/1, positive class = 1).
pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(CamfError::Data(format!(
            "confusion length mismatch: {} predictions, {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(CamfError::Data("confusion on empty inputs".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (y, p) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fn_ += 1,
            _ => {
                return Err(CamfError::Data(format!(
                    "labels must be 0 or 1, got prediction {p} / label {y}"
                )))
            }
        }
    }
    Ok(c)
}

/// `2*TP / (2*TP + FP + FN)`; 0 when the denominator vanishes.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 0.0;
    }
    (2 * c.tp) as f64 / denom as f64
}

/// Matthews correlation via u128 products, safe from intermediate overflow;
/// 0 when any denominator factor vanishes.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as u128, c.fp as u128, c.tn as u128, c.fn_ as u128);
    let denom_sq = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom_sq == 0 {
        return 0.0;
    }
    let num = (tp * tn) as i128 - (fp * fn_) as i128;
    num as f64 / (denom_sq as f64).sqrt()
}

/// `(TP+TN) / total`; errors when no subjects were evaluated.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(CamfError::Data("accuracy of an empty confusion table".into()));
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

/// True when the F1 zero-denominator convention fired.
pub fn f1_degenerate(c: &ConfusionCounts) -> bool {
    2 * c.tp + c.fp + c.fn_ == 0
}

/// True when the MCC zero-denominator convention fired.
pub fn mcc_degenerate(c: &ConfusionCounts) -> bool {
    let (tp, fp, tn, fn_) = (c.tp as u128, c.fp as u128, c.tn as u128, c.fn_ as u128);
    (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_) == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_tabulated_counts() {
        let labels = [1u8, 1, 0, 0];
        let preds = [1u8, 0, 0, 1];
        let c = confusion(&preds, &labels).unwrap();
        assert_eq!((c.tp, c.fn_, c.tn, c.fp), (1, 1, 1, 1));
        // Numerator symmetry: all-equal counts give MCC 0.
        assert_eq!(mcc(&c), 0.0);
    }

    #[test]
    fn all_correct_has_no_errors() {
        let labels = [1u8, 0, 1, 0, 1];
        let c = confusion(&labels, &labels).unwrap();
        assert_eq!(c.fp, 0);
        assert_eq!(c.fn_, 0);
        assert_eq!(f1(&c), 1.0);
        assert_eq!(mcc(&c), 1.0);
        assert_eq!(accuracy(&c).unwrap(), 1.0);
    }

    #[test]
    fn empty_inputs_error() {
        assert!(confusion(&[], &[]).is_err());
        assert!(confusion(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(
            f1(&ConfusionCounts { tp: 5, fp: 0, tn: 0, fn_: 0 }),
            1.0
        );
        let v = f1(&ConfusionCounts { tp: 2, fp: 1, tn: 0, fn_: 1 });
        assert!((v - 4.0 / 6.0).abs() < 1e-15);
        // Degenerate: nothing positive anywhere -> 0 by convention.
        let c = ConfusionCounts { tp: 0, fp: 0, tn: 10, fn_: 0 };
        assert_eq!(f1(&c), 0.0);
        assert!(f1_degenerate(&c));
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(
            mcc(&ConfusionCounts { tp: 5, fp: 0, tn: 5, fn_: 0 }),
            1.0
        );
        let c = ConfusionCounts { tp: 90, fp: 4, tn: 1, fn_: 5 };
        // Independent high-precision route: per-factor square roots.
        let num = 90.0 * 1.0 - 4.0 * 5.0;
        let den = (94.0f64).sqrt() * (95.0f64).sqrt() * (5.0f64).sqrt() * (6.0f64).sqrt();
        assert!((mcc(&c) - num / den).abs() < 1e-12);
        let d = ConfusionCounts { tp: 3, fp: 0, tn: 0, fn_: 0 };
        assert_eq!(mcc(&d), 0.0);
        assert!(mcc_degenerate(&d));
    }

    #[test]
    fn accuracy_examples() {
        let c = ConfusionCounts { tp: 3, fp: 2, tn: 4, fn_: 1 };
        assert!((accuracy(&c).unwrap() - 0.7).abs() < 1e-15);
        let all_wrong = ConfusionCounts { tp: 0, fp: 3, tn: 0, fn_: 2 };
        assert_eq!(accuracy(&all_wrong).unwrap(), 0.0);
        assert!(accuracy(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn class_swap_negates_mcc_and_keeps_accuracy() {
        let c = ConfusionCounts { tp: 7, fp: 3, tn: 11, fn_: 2 };
        // Swapping positive/negative roles: tp<->tn, fp<->fn.
        let swapped = ConfusionCounts { tp: c.tn, fp: c.fn_, tn: c.tp, fn_: c.fp };
        assert!((mcc(&c) + mcc(&swapped)).abs() < 1e-15);
        assert_eq!(accuracy(&c).unwrap(), accuracy(&swapped).unwrap());
    }

    #[test]
    fn f1_invariant_to_tn() {
        let a = ConfusionCounts { tp: 4, fp: 2, tn: 0, fn_: 3 };
        let b = ConfusionCounts { tp: 4, fp: 2, tn: 999, fn_: 3 };
        assert_eq!(f1(&a), f1(&b));
    }
}
