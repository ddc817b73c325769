//! Segmentation objective: soft Dice, cross-entropy, and their mix
//! `alpha * dice + (1 - alpha) * ce`.
//!
//! Dice is reported as `1 - mean_c r_c` where the per-class ratio is
//! `r_c = (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps)`, so a perfect
//! prediction scores ~0 and the range is [0, 1]. Cross-entropy is averaged
//! over voxels. Both sums run jointly over batch and voxels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardRule, Element, Graph, Tensor, Var};

/// Class channel names in one-hot order.
pub const CLASS_NAMES: [&str; 4] = ["BG", "NCR/NET", "ED", "ET"];

/// Floor applied to probabilities before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the Dice term.
    pub alpha: f64,
    pub epsilon: f64,
    /// Reject targets that are not one-hot (costs a pass over the target).
    pub check_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            epsilon: 1e-5,
            check_target: cfg!(debug_assertions),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_inputs<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (n, c, sp) = pred.volume_dims("loss prediction")?;
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "loss: prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if c != CLASS_NAMES.len() {
        return Err(Error::dim(format!("loss: expected {} classes, got {c}", CLASS_NAMES.len())));
    }
    let voxels = n * sp.iter().product::<usize>();
    if cfg.check_target {
        let plane: usize = sp.iter().product();
        for b in 0..n {
            for v in 0..plane {
                let mut ones = 0;
                for ch in 0..c {
                    let y = target.data()[(b * c + ch) * plane + v];
                    if y == T::one() {
                        ones += 1;
                    } else if y != T::zero() {
                        return Err(Error::Validation(format!("target is not one-hot at voxel {v}")));
                    }
                }
                if ones != 1 {
                    return Err(Error::Validation(format!("target is not one-hot at voxel {v}")));
                }
            }
        }
    }
    Ok((c, voxels))
}

/// Per-class sums `(sum y p, sum y^2, sum p^2)`.
fn class_sums<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Vec<(T, T, T)> {
    let s = pred.shape();
    let (n, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let mut sums = vec![(T::zero(), T::zero(), T::zero()); c];
    for b in 0..n {
        for (ch, acc) in sums.iter_mut().enumerate() {
            let off = (b * c + ch) * plane;
            let p = &pred.data()[off..off + plane];
            let y = &target.data()[off..off + plane];
            for (&pv, &yv) in p.iter().zip(y) {
                acc.0 = acc.0 + yv * pv;
                acc.1 = acc.1 + yv * yv;
                acc.2 = acc.2 + pv * pv;
            }
        }
    }
    sums
}

struct DiceRule<T: Element> {
    target: Tensor<T>,
    eps: T,
}

impl<T: Element> BackwardRule<T> for DiceRule<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let pred = inputs[0];
        let s = pred.shape();
        let (n, c) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        let sums = class_sums(pred, &self.target);
        let scale = grad_out[0] / T::lit(c as f64);
        let two = T::lit(2.0);
        let mut grad = vec![T::zero(); pred.len()];
        for b in 0..n {
            for (ch, &(inter, ysq, psq)) in sums.iter().enumerate() {
                let num = two * inter + self.eps;
                let den = ysq + psq + self.eps;
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let (p, y) = (pred.data()[i], self.target.data()[i]);
                    // d/dp of -(num/den)
                    grad[i] = -scale * (two * y / den - num * two * p / (den * den));
                }
            }
        }
        vec![Some(grad)]
    }
}

struct CrossEntropyRule<T: Element> {
    target: Tensor<T>,
    voxels: usize,
}

impl<T: Element> BackwardRule<T> for CrossEntropyRule<T> {
    fn name(&self) -> &'static str {
        "cross_entropy_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let floor = T::lit(LOG_FLOOR);
        let scale = grad_out[0] / T::lit(self.voxels as f64);
        let grad = inputs[0]
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&p, &y)| if p >= floor { -scale * y / p } else { T::zero() })
            .collect();
        vec![Some(grad)]
    }
}

pub fn dice_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let (c, _) = check_inputs(g.value(pred), target, cfg)?;
    let eps = T::lit(cfg.epsilon);
    let two = T::lit(2.0);
    let mean_ratio = class_sums(g.value(pred), target)
        .into_iter()
        .map(|(inter, ysq, psq)| (two * inter + eps) / (ysq + psq + eps))
        .fold(T::zero(), |a, r| a + r)
        / T::lit(c as f64);
    let rule = DiceRule {
        target: target.clone(),
        eps,
    };
    Ok(g.custom(&[pred], Tensor::scalar(T::one() - mean_ratio), Box::new(rule)))
}

pub fn cross_entropy_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let (_, voxels) = check_inputs(g.value(pred), target, cfg)?;
    let floor = T::lit(LOG_FLOOR);
    let total = g
        .value(pred)
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |a, (&p, &y)| a + y * p.max(floor).ln());
    let value = -total / T::lit(voxels as f64);
    let rule = CrossEntropyRule {
        target: target.clone(),
        voxels,
    };
    Ok(g.custom(&[pred], Tensor::scalar(value), Box::new(rule)))
}

/// `alpha * dice + (1 - alpha) * ce`.
pub fn combined_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let dice = dice_loss(g, pred, target, cfg)?;
    let ce = cross_entropy_loss(g, pred, target, cfg)?;
    let a = g.scale(dice, T::lit(cfg.alpha));
    let b = g.scale(ce, T::lit(1.0 - cfg.alpha));
    g.add(a, b)
}

/// Scalar value of a loss, evaluated without tracking gradients.
pub fn evaluate<T: Element>(
    loss: fn(&mut Graph<T>, Var, &Tensor<T>, &LossConfig) -> Result<Var>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = loss(&mut g, p, target, cfg)?;
    Ok(g.value(l).data()[0].as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &[usize]) -> Tensor<f64> {
        let n = labels.len();
        Tensor::from_fn(&[1, 4, 1, 1, n], |i| f64::from(labels[i % n] == i / n))
    }

    #[test]
    fn perfect_prediction() {
        let t = onehot(&[0, 1, 2, 3, 0, 2]);
        let cfg = LossConfig::default();
        assert!(evaluate(dice_loss, &t, &t, &cfg).unwrap() <= 1e-4);
        assert!(evaluate(cross_entropy_loss, &t, &t, &cfg).unwrap() <= 1e-10);
    }

    #[test]
    fn uniform_cross_entropy_is_ln4() {
        let t = onehot(&[0, 1, 3, 3]);
        let p = Tensor::full(&[1, 4, 1, 1, 4], 0.25);
        let ce = evaluate(cross_entropy_loss, &p, &t, &LossConfig::default()).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_mass_on_absent_class() {
        // target uses classes 0..3, prediction puts everything on class 3
        let t = onehot(&[0, 1, 2, 0, 1, 2]);
        let p = onehot(&[3; 6]);
        let d = evaluate(dice_loss, &p, &t, &LossConfig::default()).unwrap();
        assert!(d > 0.999, "{d}");
    }

    #[test]
    fn alpha_endpoints_are_exact() {
        let t = onehot(&[0, 1, 2, 3]);
        let p = Tensor::from_fn(&[1, 4, 1, 1, 4], |i| [0.1, 0.2, 0.3, 0.4][i / 4]);
        let mut cfg = LossConfig {
            alpha: 1.0,
            ..LossConfig::default()
        };
        let dice = evaluate(dice_loss, &p, &t, &cfg).unwrap();
        assert_eq!(evaluate(combined_loss, &p, &t, &cfg).unwrap(), dice);
        cfg.alpha = 0.0;
        let ce = evaluate(cross_entropy_loss, &p, &t, &cfg).unwrap();
        assert_eq!(evaluate(combined_loss, &p, &t, &cfg).unwrap(), ce);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = onehot(&[0, 1]);
        let cfg = LossConfig {
            alpha: 1.5,
            ..LossConfig::default()
        };
        assert!(matches!(evaluate(dice_loss, &t, &t, &cfg), Err(Error::Parameter(_))));
        let cfg = LossConfig {
            check_target: true,
            ..LossConfig::default()
        };
        let bad = Tensor::full(&[1, 4, 1, 1, 2], 0.25);
        assert!(matches!(evaluate(dice_loss, &bad, &bad, &cfg), Err(Error::Validation(_))));
        let other = onehot(&[0, 1, 2]);
        assert!(matches!(evaluate(dice_loss, &t, &other, &cfg), Err(Error::Dimension(_))));
    }
}
