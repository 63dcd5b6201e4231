//! Weighted bag likelihood: sub-bag probabilities, bag probability, loss and
//! the analytic gradient with respect to every instance logit.
//!
//! A bag splits into a positive sub-bag (instances with weight `w_i > 0`,
//! weights summing to one) and a negative sub-bag (`w_i = 0`):
//!
//! ```text
//! p+ = Σ_{w_i>0} w_i · p_i+          p- = (1/n-) Σ_{w_i=0} p_i-
//! p  = p+ · p-                        L  = -1{n+>0} log p+ - 1{n->0} log p-
//! ∂L/∂h_i = (-1{w_i>0} w_i / p+  +  1{w_i=0} / (p- n-)) · p_i+ · p_i-
//! ```
//!
//! Both log-probabilities are evaluated with log-sum-exp over log-sigmoids.
//! Loss and gradient stay finite for arbitrarily large logits.

use crate::error::{Error, Result};
use crate::model::InstanceOutput;

/// Allowed deviation of the positive weights from summing to one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Denominator floor used by [`relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct BagLossResult {
    /// Weighted positive sub-bag probability; `None` when the sub-bag is empty.
    pub p_bag_pos: Option<f64>,
    /// Averaged negative sub-bag probability; `None` when the sub-bag is empty.
    pub p_bag_neg: Option<f64>,
    /// Product of the defined sub-bag probabilities.
    pub p_bag: f64,
    pub loss: f64,
    /// `∂L/∂h_i`, aligned with the input instances.
    pub grad_h: Vec<f64>,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(h)`.
pub fn log_sigmoid(h: f64) -> f64 {
    -softplus(-h)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Checks the weight contract and returns `(n_pos, n_neg)`.
pub fn validate_weights(n_instances: usize, weights: &[f64]) -> Result<(usize, usize)> {
    if n_instances == 0 {
        return Err(Error::InvalidArgument("empty bag".into()));
    }
    if weights.len() != n_instances {
        return Err(Error::Shape(format!(
            "{} weights for {n_instances} instances",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidArgument(format!("invalid instance weight {w}")));
    }
    let n_pos = weights.iter().filter(|&&w| w > 0.0).count();
    if n_pos > 0 {
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "positive weights sum to {sum}, expected 1"
            )));
        }
    }
    Ok((n_pos, n_instances - n_pos))
}

/// Bag loss and per-instance gradient from model outputs.
pub fn bag_loss(outputs: &[InstanceOutput], weights: &[f64]) -> Result<BagLossResult> {
    let logits: Vec<f64> = outputs.iter().map(|o| o.h).collect();
    bag_loss_from_logits(&logits, weights)
}

/// Same as [`bag_loss`], taking raw logits `h_i`.
pub fn bag_loss_from_logits(logits: &[f64], weights: &[f64]) -> Result<BagLossResult> {
    let (n_pos, n_neg) = validate_weights(logits.len(), weights)?;
    if let Some(h) = logits.iter().find(|h| !h.is_finite()) {
        return Err(Error::NonFinite(format!("instance logit {h}")));
    }

    let pos = || {
        logits
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&h, &w)| w.ln() + log_sigmoid(h))
    };
    let neg = || {
        logits
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w == 0.0)
            .map(|(&h, _)| log_sigmoid(-h))
    };

    let log_p_pos = (n_pos > 0).then(|| log_sum_exp(pos()));
    let log_p_neg = (n_neg > 0).then(|| log_sum_exp(neg()) - (n_neg as f64).ln());

    let loss = -log_p_pos.unwrap_or(0.0) - log_p_neg.unwrap_or(0.0);
    let grad_h = logits
        .iter()
        .zip(weights)
        .map(|(&h, &w)| {
            let (lp, ln) = (log_sigmoid(h), log_sigmoid(-h));
            if w > 0.0 {
                // -(w / p+) p_i+ p_i-, with p_i+/p+ formed in log space
                -w * ln.exp() * (lp - log_p_pos.unwrap_or(0.0)).exp()
            } else {
                lp.exp() * (ln - log_p_neg.unwrap_or(0.0)).exp() / n_neg as f64
            }
        })
        .collect();

    let p_bag_pos = log_p_pos.map(f64::exp);
    let p_bag_neg = log_p_neg.map(f64::exp);
    Ok(BagLossResult {
        p_bag_pos,
        p_bag_neg,
        p_bag: p_bag_pos.unwrap_or(1.0) * p_bag_neg.unwrap_or(1.0),
        loss,
        grad_h,
    })
}

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the analytic gradient with central differences of the loss.
///
/// Returns the largest [`relative_error`] over all instances.
pub fn grad_check(outputs: &[InstanceOutput], weights: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    let mut logits: Vec<f64> = outputs.iter().map(|o| o.h).collect();
    let analytic = bag_loss_from_logits(&logits, weights)?.grad_h;
    let mut worst = 0.0_f64;
    for i in 0..logits.len() {
        let h = logits[i];
        logits[i] = h + epsilon;
        let up = bag_loss_from_logits(&logits, weights)?.loss;
        logits[i] = h - epsilon;
        let down = bag_loss_from_logits(&logits, weights)?.loss;
        logits[i] = h;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn outs(logits: &[f64]) -> Vec<InstanceOutput> {
        logits.iter().map(|&h| InstanceOutput::from_logit(h)).collect()
    }

    #[test]
    fn single_positive_instance() {
        let r = bag_loss_from_logits(&[logit(0.8)], &[1.0]).unwrap();
        assert!((r.p_bag_pos.unwrap() - 0.8).abs() < 1e-12);
        assert!(r.p_bag_neg.is_none());
        assert!((r.loss - 0.223_143_551_314_209_76).abs() < 1e-12);
        assert!((r.grad_h[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn negative_bag_of_two() {
        let r = bag_loss_from_logits(&[logit(0.1), logit(0.3)], &[0.0, 0.0]).unwrap();
        assert!(r.p_bag_pos.is_none());
        assert!((r.p_bag_neg.unwrap() - 0.8).abs() < 1e-12);
        assert!((r.loss + 0.8f64.ln()).abs() < 1e-12);
        assert!((r.grad_h[0] - 0.05625).abs() < 1e-12);
        assert!((r.grad_h[1] - 0.13125).abs() < 1e-12);
    }

    #[test]
    fn sign_symmetry_at_zero_logit() {
        let neg = bag_loss_from_logits(&[0.0], &[0.0]).unwrap();
        assert!((neg.p_bag_neg.unwrap() - 0.5).abs() < 1e-15);
        assert!((neg.grad_h[0] - 0.5).abs() < 1e-15);
        let pos = bag_loss_from_logits(&[0.0], &[1.0]).unwrap();
        assert!((pos.grad_h[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixed_bag_uses_product() {
        let r = bag_loss_from_logits(&[1.0, -2.0, 0.5], &[0.25, 0.75, 0.0]).unwrap();
        let pp = 0.25 * sigmoid(1.0) + 0.75 * sigmoid(-2.0);
        let pn = sigmoid(-0.5);
        assert!((r.p_bag - pp * pn).abs() < 1e-14);
        assert!((r.loss + (pp * pn).ln()).abs() < 1e-13);
    }

    fn sigmoid(h: f64) -> f64 {
        1.0 / (1.0 + (-h).exp())
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let r = bag_loss_from_logits(&[-800.0, 800.0], &[1.0, 0.0]).unwrap();
        assert!(r.loss.is_finite() && r.loss > 1500.0);
        assert!((r.grad_h[0] + 1.0).abs() < 1e-12);
        assert!((r.grad_h[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contract_violations() {
        assert!(bag_loss_from_logits(&[], &[]).is_err());
        assert!(bag_loss_from_logits(&[0.0], &[-0.1]).is_err());
        assert!(bag_loss_from_logits(&[0.0, 0.0], &[0.5, 0.4]).is_err());
        assert!(bag_loss_from_logits(&[0.0], &[1.0, 0.0]).is_err());
        assert!(bag_loss_from_logits(&[f64::NAN], &[1.0]).is_err());
        assert!(grad_check(&outs(&[0.0]), &[1.0], 0.0).is_err());
        assert!(grad_check(&outs(&[0.0]), &[1.0], 1e-2).is_err());
    }

    #[test]
    fn single_instance_grad_check() {
        for h in [-7.0, -1.0, 0.0, 0.3, 4.0] {
            for w in [0.0, 1.0] {
                assert!(grad_check(&outs(&[h]), &[w], 1e-6).unwrap() < 1e-8);
            }
        }
    }

    #[test]
    fn extreme_logit_grad_check() {
        let logits = [30.0, -30.0, 30.0, -30.0, 0.0, 12.0];
        let weights = [0.4, 0.35, 0.25, 0.0, 0.0, 0.0];
        assert!(grad_check(&outs(&logits), &weights, 1e-6).unwrap() < 1e-4);
    }

    fn arb_bag() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..20).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0..10.0f64, n),
                proptest::collection::vec(prop_oneof![Just(0.0), 0.01..1.0f64], n),
            )
                .prop_map(|(h, raw)| {
                    let s: f64 = raw.iter().sum();
                    let w = raw.iter().map(|&r| if s > 0.0 { r / s } else { 0.0 }).collect();
                    (h, w)
                })
        })
    }

    proptest! {
        #[test]
        fn gradient_signs_and_convexity((h, w) in arb_bag()) {
            let r = bag_loss_from_logits(&h, &w).unwrap();
            prop_assert!(r.loss >= 0.0 && r.loss.is_finite());
            for (g, &wi) in r.grad_h.iter().zip(&w) {
                if wi > 0.0 { prop_assert!(*g < 0.0) } else { prop_assert!(*g > 0.0) }
            }
            if let Some(pp) = r.p_bag_pos {
                let probs: Vec<f64> = h.iter().zip(&w).filter(|(_, &wi)| wi > 0.0).map(|(&hi, _)| sigmoid(hi)).collect();
                let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = probs.iter().cloned().fold(0.0, f64::max);
                prop_assert!(pp >= lo * (1.0 - 1e-12) && pp <= hi * (1.0 + 1e-12));
                prop_assert!(pp > 0.0 && pp < 1.0);
            }
        }

        #[test]
        fn permutation_permutes_gradient((h, w) in arb_bag(), rot in 0usize..20) {
            let n = h.len();
            let k = rot % n;
            let rotate = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(k); v };
            let a = bag_loss_from_logits(&h, &w).unwrap();
            let b = bag_loss_from_logits(&rotate(&h), &rotate(&w)).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.max(1.0));
            for (x, y) in rotate(&a.grad_h).iter().zip(&b.grad_h) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn random_bag_grad_check((h, w) in arb_bag()) {
            prop_assert!(grad_check(&outs(&h), &w, 1e-6).unwrap() < 1e-6);
        }
    }
}
