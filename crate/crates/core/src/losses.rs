//! Segmentation objective: binary cross-entropy, soft Dice, and their
//! weighted sum `L = L_bce + lambda * L_dice`. All three take logits; the
//! sigmoid is applied internally.
//!
//! Dice is accumulated over every pixel of the batch (not averaged per
//! image), and `epsilon` is added to numerator and denominator so an empty
//! target paired with an empty prediction is well defined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::numerics::sigmoid_scalar;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Contract(format!("loss lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::Contract(format!(
                "loss epsilon must lie in (0, 1e-3), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_target<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    logits.ensure_same_shape(target, "loss target")?;
    if let Some(bad) = target.data().iter().find(|&&g| g != T::zero() && g != T::one()) {
        return Err(Error::Contract(format!(
            "ground truth must be binary, found value {bad}"
        )));
    }
    Ok(())
}

/// `log(1 + exp(-|x|)) + max(x, 0) - x * g`, the stable per-pixel BCE.
#[inline]
fn bce_term<T: Real>(x: T, g: T) -> T {
    x.max(T::zero()) - x * g + (-x.abs()).exp().ln_1p()
}

pub fn bce_from_logits<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_target(logits, target)?;
    let total: T = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &g)| bce_term(x, g))
        .sum();
    Ok(total / T::lit(logits.len() as f64))
}

pub(crate) fn bce_grad<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let n = T::lit(logits.len() as f64);
    logits
        .zip_map(target, |x, g| (sigmoid_scalar(x) - g) / n)
        .expect("shape checked in forward")
}

struct DiceSums<T> {
    inter: T,
    denom: T,
}

fn dice_sums<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> DiceSums<T> {
    let mut inter = T::zero();
    let mut denom = T::zero();
    for (&x, &g) in logits.data().iter().zip(target.data()) {
        let p = sigmoid_scalar(x);
        inter += g * p;
        denom += g * g + p * p;
    }
    DiceSums { inter, denom }
}

pub fn dice_from_logits<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<T> {
    check_target(logits, target)?;
    let s = dice_sums(logits, target);
    Ok(T::one() - (T::lit(2.0) * s.inter + eps) / (s.denom + eps))
}

pub(crate) fn dice_grad<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, eps: T) -> Tensor<T> {
    let s = dice_sums(logits, target);
    let two = T::lit(2.0);
    let num = two * s.inter + eps;
    let den = s.denom + eps;
    let den2 = den * den;
    logits
        .zip_map(target, |x, g| {
            let p = sigmoid_scalar(x);
            let dp = -(two * g * den - num * two * p) / den2;
            dp * p * (T::one() - p)
        })
        .expect("shape checked in forward")
}

/// Scalar BCE of logits against a binary mask.
pub fn bce_loss<T: Real>(logits: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    bce_from_logits(logits, gt)
}

pub fn dice_loss<T: Real>(logits: &Tensor<T>, gt: &Tensor<T>, epsilon: f64) -> Result<T> {
    dice_from_logits(logits, gt, T::lit(epsilon))
}

pub fn total_loss<T: Real>(logits: &Tensor<T>, gt: &Tensor<T>, config: &LossConfig) -> Result<T> {
    config.validate()?;
    let bce = bce_loss(logits, gt)?;
    if config.lambda == 0.0 {
        return Ok(bce);
    }
    Ok(bce + T::lit(config.lambda) * dice_loss(logits, gt, config.epsilon)?)
}

/// Differentiable total loss on the tape.
pub fn total_loss_var<T: Real>(
    graph: &mut Graph<T>,
    logits: Var,
    gt: &Tensor<T>,
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    let bce = graph.bce_loss(logits, gt)?;
    if config.lambda == 0.0 {
        return Ok(bce);
    }
    let dice = graph.dice_loss(logits, gt, T::lit(config.epsilon))?;
    let weighted = graph.scale(dice, T::lit(config.lambda));
    graph.add(bce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_single_pixel_at_half_probability_is_ln2() {
        let l = bce_loss(&t(&[0.0]), &t(&[1.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_correct_prediction_vanishes() {
        let l = bce_loss(&t(&[20.0, -20.0, 20.0]), &t(&[1.0, 0.0, 1.0])).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn bce_with_all_ones_target_is_negative_mean_log_p() {
        let logits = t(&[-1.5, 0.3, 2.0, 4.0]);
        let l = bce_loss(&logits, &t(&[1.0; 4])).unwrap();
        let want = -logits.data().iter().map(|&x| sigmoid_scalar(x).ln()).sum::<f64>() / 4.0;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        let l = bce_loss(&t(&[1e4, -1e4]), &t(&[0.0, 1.0])).unwrap();
        assert!(l.is_finite() && l > 1e3);
    }

    #[test]
    fn dice_hand_example() {
        let l = dice_loss(&t(&[0.0, 0.0]), &t(&[1.0, 0.0]), 1e-7).unwrap();
        let eps = 1e-7;
        assert!((l - (1.0 - (1.0 + eps) / (1.5 + eps))).abs() < 1e-15);
        assert!((l - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let g = t(&[1.0, 0.0, 1.0, 0.0]);
        assert!(dice_loss(&t(&[30.0, -30.0, 30.0, -30.0]), &g, 1e-7).unwrap() <= 1e-5);
        assert!(dice_loss(&t(&[-30.0, 30.0, -30.0, 30.0]), &g, 1e-7).unwrap() >= 1.0 - 1e-5);
    }

    #[test]
    fn total_loss_combinations() {
        let logits = t(&[0.0, 0.0]);
        let g = t(&[1.0, 0.0]);
        let zero = LossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(total_loss(&logits, &g, &zero).unwrap(), bce_loss(&logits, &g).unwrap());
        let two = LossConfig { lambda: 2.0, ..Default::default() };
        assert!((total_loss(&logits, &g, &two).unwrap() - 1.359814).abs() < 1e-5);
        let perfect = total_loss(&t(&[30.0, -30.0]), &g, &LossConfig::default()).unwrap();
        assert!(perfect <= 2e-5);
    }

    #[test]
    fn non_binary_target_is_a_contract_violation() {
        assert!(matches!(bce_loss(&t(&[0.0]), &t(&[0.5])), Err(Error::Contract(_))));
        assert!(matches!(dice_loss(&t(&[0.0]), &t(&[2.0]), 1e-7), Err(Error::Contract(_))));
    }

    #[test]
    fn config_bounds() {
        assert!(LossConfig { lambda: -1.0, epsilon: 1e-7 }.validate().is_err());
        assert!(LossConfig { lambda: 1.0, epsilon: 1e-2 }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn dice_decreases_as_a_positive_logit_rises() {
        let g = t(&[1.0, 0.0, 1.0, 0.0, 0.0]);
        let mut prev = f64::INFINITY;
        for step in 0..40 {
            let x = -8.0 + step as f64 * 0.4;
            let l = dice_loss(&t(&[x, 0.3, -1.0, 0.7, -2.0]), &g, 1e-7).unwrap();
            assert!(l < prev, "not decreasing at logit {x}");
            prev = l;
        }
    }
}
