//! Supervised loss: pixelwise binary cross-entropy plus soft Dice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-7;
/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub bce: f64,
    pub dice_loss: f64,
    pub total: f64,
}

impl LossValue {
    pub fn new(bce: f64, dice_loss: f64) -> Self {
        LossValue {
            bce,
            dice_loss,
            total: bce + dice_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bce.is_finite() && self.dice_loss.is_finite()
    }
}

fn check_shapes<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if probs.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs targets {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    if probs.is_empty() {
        return Err(Error::EmptyInput("loss over zero pixels".into()));
    }
    Ok(())
}

fn pairs<'a, T: Real>(probs: &'a Tensor<T>, targets: &'a Tensor<T>) -> impl Iterator<Item = (f64, f64)> + 'a {
    probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, y)| (p.to_f64().unwrap(), y.to_f64().unwrap()))
}

/// Mean binary cross-entropy over every pixel of the batch.
pub fn bce_loss<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    check_shapes(probs, targets)?;
    let sum: f64 = pairs(probs, targets)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// `1 - (2 Σpy + eps) / (Σp + Σy + eps)` pooled over the whole batch.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>, eps: f64) -> Result<f64> {
    check_shapes(probs, targets)?;
    let (inter, sum) = dice_sums(probs, targets);
    Ok(1.0 - (2.0 * inter + eps) / (sum + eps))
}

fn dice_sums<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> (f64, f64) {
    pairs(probs, targets).fold((0.0, 0.0), |(i, s), (p, y)| (i + p * y, s + p + y))
}

pub fn total_loss<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<LossValue> {
    Ok(LossValue::new(
        bce_loss(probs, targets)?,
        dice_loss(probs, targets, DICE_EPS)?,
    ))
}

/// Total loss together with its gradient with respect to `probs`.
pub fn total_loss_with_grad<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<(LossValue, Tensor<T>)> {
    let value = total_loss(probs, targets)?;
    let n = probs.len() as f64;
    let (inter, sum) = dice_sums(probs, targets);
    let num = 2.0 * inter + DICE_EPS;
    let den = sum + DICE_EPS;
    let grad = probs.zip_map(targets, |p, y| {
        let (p, y) = (p.to_f64().unwrap(), y.to_f64().unwrap());
        let d_bce = if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
            (-y / p + (1.0 - y) / (1.0 - p)) / n
        } else {
            0.0
        };
        let d_dice = -(2.0 * y * den - num) / (den * den);
        T::lit(d_bce + d_dice)
    });
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let half = t(&[0.5; 4]);
        assert!((bce_loss(&half, &t(&[1.0, 0.0, 1.0, 0.0])).unwrap() - 2f64.ln()).abs() < 1e-12);
        let v = bce_loss(&t(&[0.9, 0.2]), &t(&[1.0, 0.0])).unwrap();
        assert!((v - 0.164252).abs() < 1e-6);
        assert!((v + (0.9f64.ln() + 0.8f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn dice_closed_forms() {
        let y = t(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dice_loss(&y, &y, 1.0).unwrap(), 0.0);
        assert!((dice_loss(&t(&[0.0; 6]), &y, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(dice_loss(&t(&[0.0; 3]), &t(&[0.0; 3]), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn worked_total() {
        let v = total_loss(&t(&[0.5; 4]), &t(&[1.0; 4])).unwrap();
        assert!((v.bce - 2f64.ln()).abs() < 1e-12);
        assert!((v.dice_loss - 2.0 / 7.0).abs() < 1e-12);
        assert!((v.total - 0.978861).abs() < 1e-6);
        assert_eq!(v.total, v.bce + v.dice_loss);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        assert!(matches!(bce_loss(&t(&[0.5; 2]), &t(&[1.0; 3])), Err(Error::ShapeMismatch(_))));
    }
}
