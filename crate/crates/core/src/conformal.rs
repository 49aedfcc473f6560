//! Split-conformal calibration of quantile intervals.
//!
//! A single symmetric margin is computed from calibration conformity
//! scores and applied to both interval endpoints, giving finite-sample
//! marginal coverage of at least 1 - alpha on exchangeable data.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub margin: f64,
    pub n_cal: usize,
    pub alpha: f64,
}

/// Conformity score per element: max(q_lo - y, y - q_hi). Negative for
/// targets strictly inside the interval.
pub fn conformity_scores(q_lo: &Tensor, q_hi: &Tensor, y: &Tensor) -> Result<Tensor> {
    q_lo.check_same_shape(q_hi, "conformity_scores")?;
    q_lo.check_same_shape(y, "conformity_scores")?;
    let mut out = Tensor::zeros(y.shape().to_vec());
    for i in 0..y.len() {
        out.data_mut()[i] = (q_lo.data()[i] - y.data()[i]).max(y.data()[i] - q_hi.data()[i]);
    }
    Ok(out)
}

/// Margin = the ceil((n+1)(1-alpha))-th smallest score. When that index
/// exceeds n (too few calibration points), the margin is +infinity.
/// Ties are resolved by the indexed order statistic, no interpolation.
pub fn calibrate(scores: &Tensor, alpha: f64) -> Result<ConformalCalibration> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty calibration scores".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "miscoverage alpha must be in (0,1), got {}",
            alpha
        )));
    }
    scores.check_finite("conformity scores")?;
    let n = scores.len();
    let rank = (((n + 1) as f64) * (1.0 - alpha)).ceil() as usize;
    let margin = if rank > n {
        f64::INFINITY
    } else {
        let mut sorted = scores.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[rank - 1]
    };
    Ok(ConformalCalibration {
        margin,
        n_cal: n,
        alpha,
    })
}

/// Widens (or tightens, for negative margins) the interval symmetrically.
pub fn conformalize(
    q_lo: &Tensor,
    q_hi: &Tensor,
    cal: &ConformalCalibration,
) -> Result<(Tensor, Tensor)> {
    if !cal.margin.is_finite() {
        return Err(Error::InvalidArgument(
            "cannot conformalize with infinite margin".into(),
        ));
    }
    Ok((q_lo.map(|v| v - cal.margin), q_hi.map(|v| v + cal.margin)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn scores_match_definition() {
        let lo = Tensor::from_vec(vec![0.0, 0.0, 1.0]);
        let hi = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
        let y = Tensor::from_vec(vec![0.5, 3.0, 1.0]);
        let s = conformity_scores(&lo, &hi, &y).unwrap();
        assert!(s.data()[0] < 0.0); // strictly inside
        assert!((s.data()[1] - 2.0).abs() < 1e-12); // y = q_hi + 2
        assert_eq!(s.data()[2], 0.0); // y = q_lo = q_hi
    }

    #[test]
    fn margin_is_indexed_order_statistic() {
        // scores 1..=99, alpha = 0.1 -> ceil(100 * 0.9) = 90th smallest = 90
        let scores = Tensor::from_vec((1..=99).map(|v| v as f64).collect());
        let cal = calibrate(&scores, 0.1).unwrap();
        assert_eq!(cal.margin, 90.0);
        assert_eq!(cal.n_cal, 99);

        // alpha = 0.5, scores {1,2,3} -> index ceil(4 * 0.5) = 2 -> margin 2
        let cal = calibrate(&Tensor::from_vec(vec![1.0, 2.0, 3.0]), 0.5).unwrap();
        assert_eq!(cal.margin, 2.0);
    }

    #[test]
    fn constant_scores_give_constant_margin() {
        let cal = calibrate(&Tensor::full(vec![10], 0.7), 0.2).unwrap();
        assert_eq!(cal.margin, 0.7);
    }

    #[test]
    fn too_few_scores_give_infinite_margin() {
        // n_cal < ceil(1/alpha) - 1
        let cal = calibrate(&Tensor::from_vec(vec![1.0, 2.0]), 0.1).unwrap();
        assert!(cal.margin.is_infinite());
    }

    #[test]
    fn empty_scores_rejected() {
        assert!(calibrate(&Tensor::from_vec(vec![]), 0.1).is_err());
    }

    #[test]
    fn conformalize_shifts_endpoints() {
        let lo = Tensor::from_vec(vec![0.0]);
        let hi = Tensor::from_vec(vec![1.0]);
        let cal = ConformalCalibration {
            margin: 0.5,
            n_cal: 10,
            alpha: 0.1,
        };
        let (alo, ahi) = conformalize(&lo, &hi, &cal).unwrap();
        assert_eq!(alo.data()[0], -0.5);
        assert_eq!(ahi.data()[0], 1.5);

        let zero = ConformalCalibration {
            margin: 0.0,
            ..cal
        };
        let (blo, bhi) = conformalize(&lo, &hi, &zero).unwrap();
        assert_eq!(blo, lo);
        assert_eq!(bhi, hi);
    }

    #[test]
    fn margin_monotone_in_coverage() {
        let mut rng = Rng::new(4);
        let scores = Tensor::from_vec((0..200).map(|_| rng.normal()).collect());
        let mut prev = f64::NEG_INFINITY;
        for &alpha in &[0.5, 0.3, 0.2, 0.1, 0.05] {
            let m = calibrate(&scores, alpha).unwrap().margin;
            assert!(m >= prev, "margin not monotone at alpha {alpha}");
            prev = m;
        }
    }

    #[test]
    fn margin_invariant_under_permutation() {
        let mut rng = Rng::new(8);
        let mut v: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let a = calibrate(&Tensor::from_vec(v.clone()), 0.1).unwrap().margin;
        rng.shuffle(&mut v);
        let b = calibrate(&Tensor::from_vec(v), 0.1).unwrap().margin;
        assert_eq!(a, b);
    }
}
