//! Evaluation metrics: Dice coefficient, ROC AUC, interval coverage and
//! empirical false discovery rate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dice overlap 2|a n b| / (|a| + |b|); 1.0 when both masks are empty.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "dice")?;
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::InvalidArgument("dice requires binary masks".into()));
    }
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..a.len() {
        inter += a.data()[i] * b.data()[i];
        total += a.data()[i] + b.data()[i];
    }
    if total == 0.0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter / total)
    }
}

/// ROC AUC via the Mann-Whitney statistic: P(score+ > score-) plus half
/// the tie probability, computed from midranks.
pub fn roc_auc(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    scores.check_same_shape(labels, "roc_auc")?;
    if !labels.is_binary() {
        return Err(Error::InvalidArgument("roc_auc labels must be binary".into()));
    }
    let n = scores.len();
    let n_pos = labels.data().iter().filter(|&&y| y == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "roc_auc requires both classes present".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores.data()[a].partial_cmp(&scores.data()[b]).unwrap());
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores.data()[idx[j]] == scores.data()[idx[i]] {
            j += 1;
        }
        let midrank = ((i + 1 + j) as f64) / 2.0; // average of ranks i+1..=j
        for &k in &idx[i..j] {
            if labels.data()[k] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of targets falling inside [lo, hi], inclusive.
pub fn coverage(lo: &Tensor, hi: &Tensor, y: &Tensor) -> Result<f64> {
    lo.check_same_shape(hi, "coverage")?;
    lo.check_same_shape(y, "coverage")?;
    if y.is_empty() {
        return Err(Error::InvalidArgument("coverage of empty tensors".into()));
    }
    let hits = (0..y.len())
        .filter(|&i| lo.data()[i] <= y.data()[i] && y.data()[i] <= hi.data()[i])
        .count();
    Ok(hits as f64 / y.len() as f64)
}

/// FP / max(1, FP + TP) for a detection mask against ground truth.
pub fn empirical_fdr(mask: &Tensor, truth: &Tensor) -> Result<f64> {
    mask.check_same_shape(truth, "empirical_fdr")?;
    if !mask.is_binary() || !truth.is_binary() {
        return Err(Error::InvalidArgument(
            "empirical_fdr requires binary masks".into(),
        ));
    }
    let mut fp = 0usize;
    let mut tp = 0usize;
    for i in 0..mask.len() {
        if mask.data()[i] == 1.0 {
            if truth.data()[i] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(fp as f64 / 1usize.max(fp + tp) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::from_vec(v)
    }

    #[test]
    fn dice_identities() {
        let a = t(vec![1.0, 0.0, 1.0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = t(vec![0.0, 1.0, 0.0]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // |a| = |b| = 2, overlap 1 -> 0.5
        let c = t(vec![1.0, 1.0, 0.0, 0.0]);
        let d = t(vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(dice(&c, &d).unwrap(), 0.5);
        // both empty -> 1.0
        let e = t(vec![0.0, 0.0]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        // symmetry
        assert_eq!(dice(&c, &d).unwrap(), dice(&d, &c).unwrap());
    }

    #[test]
    fn dice_rejects_non_binary() {
        assert!(dice(&t(vec![0.5]), &t(vec![1.0])).is_err());
    }

    #[test]
    fn auc_separated_constant_and_pairwise() {
        let labels = t(vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(
            roc_auc(&t(vec![0.1, 0.2, 0.8, 0.9]), &labels).unwrap(),
            1.0
        );
        assert_eq!(roc_auc(&t(vec![0.5; 4]), &labels).unwrap(), 0.5);
        // {0.1, 0.4, 0.35, 0.8} labels {0,0,1,1}: 3 of 4 pos/neg pairs won
        let auc = roc_auc(&t(vec![0.1, 0.4, 0.35, 0.8]), &labels).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(roc_auc(&t(vec![0.1, 0.2]), &t(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn coverage_fractions() {
        let lo = t(vec![0.0; 4]);
        let hi = t(vec![1.0; 4]);
        assert_eq!(coverage(&lo, &hi, &t(vec![0.5; 4])).unwrap(), 1.0);
        assert_eq!(coverage(&lo, &hi, &t(vec![2.0; 4])).unwrap(), 0.0);
        assert_eq!(
            coverage(&lo, &hi, &t(vec![0.5, 0.5, 2.0, -1.0])).unwrap(),
            0.5
        );
        // boundary inclusive
        assert_eq!(coverage(&lo, &hi, &t(vec![0.0, 1.0, 0.0, 1.0])).unwrap(), 1.0);
    }

    #[test]
    fn empirical_fdr_cases() {
        let truth = t(vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(empirical_fdr(&t(vec![0.0; 4]), &truth).unwrap(), 0.0);
        assert_eq!(empirical_fdr(&truth.clone(), &truth).unwrap(), 0.0);
        assert_eq!(empirical_fdr(&t(vec![1.0; 4]), &truth).unwrap(), 0.5);
    }
}
