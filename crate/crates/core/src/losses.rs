//! Objective functions: pinball loss, joint multi-quantile loss, Gaussian
//! negative log-likelihood, diagonal-Gaussian KL, the smoothed binary
//! quantile regression objective and weighted binary cross-entropy.
//!
//! All losses reduce by sum; the trainers divide by batch size. Each
//! returns the scalar plus its gradient w.r.t. the prediction, so the
//! network backward pass can consume them directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A quantile level strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "quantile level must be in (0,1), got {}",
                alpha
            )));
        }
        Ok(QuantileLevel(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Scalar loss plus gradient w.r.t. the prediction tensor.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// Scalar loss plus gradients w.r.t. a pair of prediction tensors.
#[derive(Debug, Clone)]
pub struct PairLossValue {
    pub value: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Pinball (check) loss: sum_i rho_alpha(y_i - f_i) with
/// rho_alpha(r) = alpha*r for r > 0 and (1-alpha)*(-r) otherwise.
/// The subgradient at r = 0 is fixed at 0.
pub fn pinball(pred: &Tensor, target: &Tensor, alpha: QuantileLevel) -> Result<LossValue> {
    pred.check_same_shape(target, "pinball")?;
    let a = alpha.value();
    let mut value = 0.0;
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    for i in 0..pred.len() {
        let r = target.data()[i] - pred.data()[i];
        if r > 0.0 {
            value += a * r;
            grad.data_mut()[i] = -a;
        } else if r < 0.0 {
            value += (1.0 - a) * (-r);
            grad.data_mut()[i] = 1.0 - a;
        }
    }
    Ok(LossValue { value, grad })
}

/// Sum of two pinball losses on a shared target; no cross-quantile term.
pub fn joint_quantile_loss(
    pred_lo: &Tensor,
    pred_hi: &Tensor,
    target: &Tensor,
    alpha_lo: QuantileLevel,
    alpha_hi: QuantileLevel,
) -> Result<PairLossValue> {
    if alpha_lo.value() >= alpha_hi.value() {
        return Err(Error::InvalidArgument(format!(
            "quantile levels must be ordered: {} >= {}",
            alpha_lo.value(),
            alpha_hi.value()
        )));
    }
    let lo = pinball(pred_lo, target, alpha_lo)?;
    let hi = pinball(pred_hi, target, alpha_hi)?;
    Ok(PairLossValue {
        value: lo.value + hi.value,
        grad_a: lo.grad,
        grad_b: hi.grad,
    })
}

/// Negative Gaussian log-likelihood (up to the constant term):
/// sum_i [ 1/2 log sigma^2_i + (x_i - mu_i)^2 / (2 sigma^2_i) ].
pub fn gaussian_nll(x: &Tensor, mu: &Tensor, log_var: &Tensor) -> Result<PairLossValue> {
    x.check_same_shape(mu, "gaussian_nll mu")?;
    x.check_same_shape(log_var, "gaussian_nll log_var")?;
    let mut value = 0.0;
    let mut grad_mu = Tensor::zeros(x.shape().to_vec());
    let mut grad_lv = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let lv = log_var.data()[i];
        let var = lv.exp();
        let d = x.data()[i] - mu.data()[i];
        value += 0.5 * lv + d * d / (2.0 * var);
        grad_mu.data_mut()[i] = -d / var;
        grad_lv.data_mut()[i] = 0.5 - d * d / (2.0 * var);
    }
    Ok(PairLossValue {
        value,
        grad_a: grad_mu,
        grad_b: grad_lv,
    })
}

/// KL( N(mu, sigma^2) || N(0, 1) ) summed over dimensions:
/// 1/2 sum_i (sigma^2_i + mu_i^2 - 1 - log sigma^2_i).
pub fn kl_diag_gaussian(mu: &Tensor, log_var: &Tensor) -> Result<PairLossValue> {
    mu.check_same_shape(log_var, "kl_diag_gaussian")?;
    let mut value = 0.0;
    let mut grad_mu = Tensor::zeros(mu.shape().to_vec());
    let mut grad_lv = Tensor::zeros(mu.shape().to_vec());
    for i in 0..mu.len() {
        let m = mu.data()[i];
        let lv = log_var.data()[i];
        let var = lv.exp();
        value += 0.5 * (var + m * m - 1.0 - lv);
        grad_mu.data_mut()[i] = m;
        grad_lv.data_mut()[i] = 0.5 * (var - 1.0);
    }
    Ok(PairLossValue {
        value,
        grad_a: grad_mu,
        grad_b: grad_lv,
    })
}

/// Smoothed binary quantile regression objective, negated for
/// minimization: -sum_i [y_i - (1 - tau)] K(f_i), K = sigmoid.
/// Maximizing the original objective drives f_i positive exactly where
/// P(Y = 1) exceeds 1 - tau.
pub fn bqr_objective(logits: &Tensor, labels: &Tensor, tau: QuantileLevel) -> Result<LossValue> {
    logits.check_same_shape(labels, "bqr_objective")?;
    if !labels.is_binary() {
        return Err(Error::InvalidArgument(
            "bqr_objective labels must be binary".into(),
        ));
    }
    let c = 1.0 - tau.value();
    let mut value = 0.0;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for i in 0..logits.len() {
        let k = sigmoid(logits.data()[i]);
        let coeff = labels.data()[i] - c;
        value -= coeff * k;
        grad.data_mut()[i] = -coeff * k * (1.0 - k);
    }
    Ok(LossValue { value, grad })
}

/// Binary cross-entropy on logits with a weight on the positive class:
/// -sum_i [ w y_i log K(f_i) + (1 - y_i) log(1 - K(f_i)) ].
pub fn weighted_bce(logits: &Tensor, labels: &Tensor, weight_pos: f64) -> Result<LossValue> {
    logits.check_same_shape(labels, "weighted_bce")?;
    if weight_pos <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "weight_pos must be positive, got {}",
            weight_pos
        )));
    }
    let mut value = 0.0;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for i in 0..logits.len() {
        let f = logits.data()[i];
        let y = labels.data()[i];
        // log K(f) = -softplus(-f), log(1 - K(f)) = -softplus(f)
        let softplus = |t: f64| {
            if t > 30.0 {
                t
            } else {
                (1.0 + t.exp()).ln()
            }
        };
        let k = sigmoid(f);
        value += weight_pos * y * softplus(-f) + (1.0 - y) * softplus(f);
        grad.data_mut()[i] = -weight_pos * y * (1.0 - k) + (1.0 - y) * k;
    }
    Ok(LossValue { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn level(a: f64) -> QuantileLevel {
        QuantileLevel::new(a).unwrap()
    }

    /// Central finite difference of a scalar-valued loss at one coordinate.
    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, at: &Tensor, i: usize, eps: f64) -> f64 {
        let mut hi = at.clone();
        hi.data_mut()[i] += eps;
        let mut lo = at.clone();
        lo.data_mut()[i] -= eps;
        (f(&hi) - f(&lo)) / (2.0 * eps)
    }

    fn assert_grad_matches(f: &dyn Fn(&Tensor) -> f64, at: &Tensor, analytic: &Tensor) {
        for i in 0..at.len() {
            let num = fd_grad(f, at, i, 1e-5);
            let ana = analytic.data()[i];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom < 1e-6,
                "coord {}: analytic {} vs numeric {}",
                i,
                ana,
                num
            );
        }
    }

    #[test]
    fn pinball_positive_residual_branch() {
        // r = 2.0, alpha = 0.15 -> 0.30
        let l = pinball(&Tensor::scalar(0.0), &Tensor::scalar(2.0), level(0.15)).unwrap();
        assert!((l.value - 0.30).abs() < 1e-12);
    }

    #[test]
    fn pinball_negative_residual_branch() {
        // r = -2.0, alpha = 0.15 -> 1.70 (nonnegative convention)
        let l = pinball(&Tensor::scalar(2.0), &Tensor::scalar(0.0), level(0.15)).unwrap();
        assert!((l.value - 1.70).abs() < 1e-12);
    }

    #[test]
    fn pinball_kink_subgradient_zero() {
        let l = pinball(&Tensor::scalar(1.0), &Tensor::scalar(1.0), level(0.3)).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad.data()[0], 0.0);
    }

    #[test]
    fn pinball_median_minimizer_brute_force() {
        // Constant predictor minimizing sum rho_0.5 over {1..10}: any c in [5, 6].
        let targets = Tensor::from_vec((1..=10).map(|v| v as f64).collect());
        let cost = |c: f64| {
            let pred = Tensor::full(vec![10], c);
            pinball(&pred, &targets, level(0.5)).unwrap().value
        };
        let mut best_c = 0.0;
        let mut best = f64::INFINITY;
        let mut c = 0.0;
        while c <= 12.0 {
            let v = cost(c);
            if v < best {
                best = v;
                best_c = c;
            }
            c += 0.01;
        }
        assert!(
            (5.0 - 1e-9..=6.0 + 1e-9).contains(&best_c),
            "minimizer {best_c}"
        );
        // all of [5,6] is optimal up to grid resolution
        assert!((cost(5.0) - cost(6.0)).abs() < 1e-9);
    }

    #[test]
    fn pinball_gradient_matches_fd_away_from_kink() {
        let mut rng = Rng::new(3);
        let target = Tensor::from_vec((0..16).map(|_| rng.normal()).collect());
        let mut pred = Tensor::from_vec((0..16).map(|_| rng.normal()).collect());
        // keep residuals away from the kink
        for i in 0..pred.len() {
            if (target.data()[i] - pred.data()[i]).abs() < 1e-3 {
                pred.data_mut()[i] += 0.1;
            }
        }
        let l = pinball(&pred, &target, level(0.15)).unwrap();
        let f = |p: &Tensor| pinball(p, &target, level(0.15)).unwrap().value;
        assert_grad_matches(&f, &pred, &l.grad);
    }

    #[test]
    fn joint_quantile_is_additive_and_zero_at_target() {
        let t = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let l = joint_quantile_loss(&t, &t, &t, level(0.15), level(0.5)).unwrap();
        assert_eq!(l.value, 0.0);

        let lo = Tensor::from_vec(vec![0.0, 1.0, 2.0]);
        let hi = Tensor::from_vec(vec![2.0, -1.0, 0.0]);
        let joint = joint_quantile_loss(&lo, &hi, &t, level(0.15), level(0.5)).unwrap();
        let a = pinball(&lo, &t, level(0.15)).unwrap().value;
        let b = pinball(&hi, &t, level(0.5)).unwrap().value;
        assert!((joint.value - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn joint_quantile_rejects_unordered_levels() {
        let t = Tensor::scalar(0.0);
        assert!(joint_quantile_loss(&t, &t, &t, level(0.5), level(0.15)).is_err());
    }

    #[test]
    fn joint_quantile_no_cross_coupling() {
        // perturbing the low head leaves the high head's gradient unchanged
        let t = Tensor::from_vec(vec![0.3, -1.1, 2.0, 0.0]);
        let lo1 = Tensor::from_vec(vec![0.0, 0.0, 0.0, 1.0]);
        let lo2 = Tensor::from_vec(vec![5.0, -5.0, 2.5, -1.0]);
        let hi = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let a = joint_quantile_loss(&lo1, &hi, &t, level(0.15), level(0.5)).unwrap();
        let b = joint_quantile_loss(&lo2, &hi, &t, level(0.15), level(0.5)).unwrap();
        assert_eq!(a.grad_b, b.grad_b);
    }

    #[test]
    fn trained_constant_heads_recover_empirical_quantiles() {
        // two constant heads fitted to 10_000 N(0,1) draws at (0.15, 0.5)
        let mut rng = Rng::new(11);
        let n = 10_000;
        let sample = Tensor::from_vec((0..n).map(|_| rng.normal()).collect());
        let mut lo = 0.0;
        let mut hi = 0.0;
        let lr = 0.005;
        for _ in 0..4000 {
            let l = joint_quantile_loss(
                &Tensor::full(vec![n], lo),
                &Tensor::full(vec![n], hi),
                &sample,
                level(0.15),
                level(0.5),
            )
            .unwrap();
            lo -= lr * l.grad_a.sum() / n as f64;
            hi -= lr * l.grad_b.sum() / n as f64;
        }
        // empirical quantiles of the sample are the oracle
        let mut sorted = sample.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let emp_lo = sorted[(0.15 * n as f64) as usize];
        let emp_hi = sorted[(0.5 * n as f64) as usize];
        assert!((lo - emp_lo).abs() < 0.05, "lo {lo} vs {emp_lo}");
        assert!((hi - emp_hi).abs() < 0.05, "hi {hi} vs {emp_hi}");
    }

    #[test]
    fn gaussian_nll_closed_form_points() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let l = gaussian_nll(&x, &x, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(l.value, 0.0);
        // x - mu = 1, log var = 0 -> 0.5 per element
        let mu = Tensor::from_vec(vec![0.0, 1.0]);
        let l = gaussian_nll(&x, &mu, &Tensor::zeros(vec![2])).unwrap();
        assert!((l.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_variance_shrinks_without_bound() {
        // x = mu fixed; gradient descent on free log var decreases it
        // monotonically for 100 steps
        let x = Tensor::from_vec(vec![0.2, 0.7, -0.3]);
        let mut lv = Tensor::zeros(vec![3]);
        let mut prev = 0.0;
        for step in 0..100 {
            let l = gaussian_nll(&x, &x, &lv).unwrap();
            let median = {
                let mut v = lv.data().to_vec();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v[1]
            };
            if step > 0 {
                assert!(median < prev, "step {step}: {median} !< {prev}");
            }
            prev = median;
            for i in 0..3 {
                lv.data_mut()[i] -= 0.5 * l.grad_b.data()[i];
            }
        }
    }

    #[test]
    fn gaussian_nll_gradients_match_fd() {
        let mut rng = Rng::new(5);
        let x = Tensor::from_vec((0..8).map(|_| rng.normal()).collect());
        let mu = Tensor::from_vec((0..8).map(|_| rng.normal()).collect());
        let lv = Tensor::from_vec((0..8).map(|_| 0.5 * rng.normal()).collect());
        let l = gaussian_nll(&x, &mu, &lv).unwrap();
        let f_mu = |m: &Tensor| gaussian_nll(&x, m, &lv).unwrap().value;
        assert_grad_matches(&f_mu, &mu, &l.grad_a);
        let f_lv = |v: &Tensor| gaussian_nll(&x, &mu, v).unwrap().value;
        assert_grad_matches(&f_lv, &lv, &l.grad_b);
    }

    #[test]
    fn kl_closed_form_points() {
        let z = Tensor::zeros(vec![4]);
        assert_eq!(kl_diag_gaussian(&z, &z).unwrap().value, 0.0);
        let mu = Tensor::full(vec![4], 1.0);
        let l = kl_diag_gaussian(&mu, &z).unwrap();
        assert!((l.value - 2.0).abs() < 1e-12); // 0.5 per element
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // MC oracle: E_q[log q(z) - log p(z)] with q = N(mu, sigma^2)
        let mu = Tensor::from_vec(vec![0.7, -0.4]);
        let lv = Tensor::from_vec(vec![0.3, -0.6]);
        let analytic = kl_diag_gaussian(&mu, &lv).unwrap().value;
        let mut rng = Rng::new(99);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for i in 0..2 {
                let s = (0.5 * lv.data()[i]).exp();
                let z = mu.data()[i] + s * rng.normal();
                let log_q = -0.5 * ((z - mu.data()[i]) / s).powi(2) - s.ln();
                let log_p = -0.5 * z * z;
                acc += log_q - log_p;
            }
        }
        let mc = acc / n as f64;
        assert!(
            (mc - analytic).abs() / analytic.abs() < 0.01,
            "mc {mc} vs analytic {analytic}"
        );
    }

    #[test]
    fn kl_gradients_match_fd() {
        let mu = Tensor::from_vec(vec![0.7, -0.4, 1.2]);
        let lv = Tensor::from_vec(vec![0.3, -0.6, 0.1]);
        let l = kl_diag_gaussian(&mu, &lv).unwrap();
        let f_mu = |m: &Tensor| kl_diag_gaussian(m, &lv).unwrap().value;
        assert_grad_matches(&f_mu, &mu, &l.grad_a);
        let f_lv = |v: &Tensor| kl_diag_gaussian(&mu, v).unwrap().value;
        assert_grad_matches(&f_lv, &lv, &l.grad_b);
    }

    #[test]
    fn bqr_contribution_at_zero_logit() {
        // K(0) = 0.5: contribution (y - (1 - tau)) * 0.5 per element
        let logits = Tensor::zeros(vec![1]);
        let y1 = Tensor::from_vec(vec![1.0]);
        let l = bqr_objective(&logits, &y1, level(0.875)).unwrap();
        assert!((-l.value - (1.0 - 0.125) * 0.5).abs() < 1e-12);
    }

    #[test]
    fn bqr_saturates_to_coefficient() {
        // y = 1, tau = 0.875, f -> +inf: objective -> 0.875
        let logits = Tensor::from_vec(vec![60.0]);
        let y1 = Tensor::from_vec(vec![1.0]);
        let l = bqr_objective(&logits, &y1, level(0.875)).unwrap();
        assert!((-l.value - 0.875).abs() < 1e-9);
    }

    #[test]
    fn bqr_rejects_non_binary_labels() {
        let logits = Tensor::zeros(vec![1]);
        let y = Tensor::from_vec(vec![0.5]);
        assert!(bqr_objective(&logits, &y, level(0.5)).is_err());
    }

    #[test]
    fn bqr_optimal_constant_logit_sign_flips_at_label_rate() {
        // labels 1 w.p. 0.7: optimal constant f is positive iff 0.7 > 1 - tau.
        // Brute-force scan over a grid of constant logits.
        let mut rng = Rng::new(17);
        let n = 4000;
        let labels =
            Tensor::from_vec((0..n).map(|_| if rng.uniform() < 0.7 { 1.0 } else { 0.0 }).collect());
        let best_logit = |tau: f64| {
            let mut best_f = 0.0;
            let mut best = f64::INFINITY;
            let mut f = -4.0;
            while f <= 4.0 {
                let v = bqr_objective(&Tensor::full(vec![n], f), &labels, level(tau))
                    .unwrap()
                    .value;
                if v < best {
                    best = v;
                    best_f = f;
                }
                f += 0.05;
            }
            best_f
        };
        // 0.7 > 1 - 0.375 = 0.625 -> positive
        assert!(best_logit(0.375) > 0.0);
        // 0.7 > 1 - 0.875 = 0.125 -> positive
        assert!(best_logit(0.875) > 0.0);
        // 0.7 < 1 - 0.875... the flip happens where 1 - tau crosses the
        // label rate: tau = 0.125 gives 1 - tau = 0.875 > 0.7 -> negative
        assert!(best_logit(0.125) < 0.0);
    }

    #[test]
    fn bqr_gradient_matches_fd() {
        let mut rng = Rng::new(23);
        let logits = Tensor::from_vec((0..8).map(|_| rng.normal()).collect());
        let labels =
            Tensor::from_vec((0..8).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect());
        let l = bqr_objective(&logits, &labels, level(0.375)).unwrap();
        let f = |p: &Tensor| bqr_objective(p, &labels, level(0.375)).unwrap().value;
        assert_grad_matches(&f, &logits, &l.grad);
    }

    #[test]
    fn weighted_bce_reduces_to_standard_bce() {
        // w = 1, f = 0 -> log 2 per element
        let logits = Tensor::zeros(vec![3]);
        let labels = Tensor::from_vec(vec![0.0, 1.0, 1.0]);
        let l = weighted_bce(&logits, &labels, 1.0).unwrap();
        assert!((l.value - 3.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_bce_vanishes_on_confident_correct() {
        let logits = Tensor::from_vec(vec![50.0]);
        let labels = Tensor::from_vec(vec![1.0]);
        let l = weighted_bce(&logits, &labels, 2.5).unwrap();
        assert!(l.value < 1e-9);
    }

    #[test]
    fn weighted_bce_gradient_matches_fd() {
        let mut rng = Rng::new(31);
        let logits = Tensor::from_vec((0..8).map(|_| 2.0 * rng.normal()).collect());
        let labels =
            Tensor::from_vec((0..8).map(|_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 }).collect());
        let l = weighted_bce(&logits, &labels, 3.0).unwrap();
        let f = |p: &Tensor| weighted_bce(p, &labels, 3.0).unwrap().value;
        assert_grad_matches(&f, &logits, &l.grad);
    }
}
