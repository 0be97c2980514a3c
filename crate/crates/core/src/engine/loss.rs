//! Soft Dice loss over the foreground classes.

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::metrics::LabelVolume;
use crate::network::label_to_class;
use crate::tensor::Tensor;

/// Smoothing term added to numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// One-hot targets `[B, C, D, H, W]` from label maps of equal shape.
pub fn one_hot(labels: &[&LabelVolume], classes: usize) -> Result<Tensor> {
    let Some(first) = labels.first() else {
        return shape_err("empty label batch");
    };
    let shape = first.shape();
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; labels.len() * classes * n];
    for (b, l) in labels.iter().enumerate() {
        if l.shape() != shape {
            return shape_err(format!("label maps {:?} and {shape:?} in one batch", l.shape()));
        }
        for (i, &v) in l.data().iter().enumerate() {
            let c = label_to_class(v);
            if c >= classes {
                return shape_err(format!("label {v} needs class {c} but only {classes} classes"));
            }
            data[(b * classes + c) * n + i] = 1.0;
        }
    }
    Tensor::new(vec![labels.len(), classes, shape[0], shape[1], shape[2]], data)
}

/// `1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps)` over the channels
/// `from..C` of `[B, C, ...]` probabilities, summing over batch and space.
pub fn soft_dice_loss(probs: &Var, target: &Tensor, from: usize) -> Result<Var> {
    let s = probs.shape().to_vec();
    if s != target.shape() {
        return shape_err(format!("probabilities {s:?} vs target {:?}", target.shape()));
    }
    if s.len() < 2 || from >= s[1] {
        return shape_err(format!("no channels to score from {from} in {s:?}"));
    }
    let axes: Vec<usize> = std::iter::once(0).chain(2..s.len()).collect();
    let g = Var::constant(target.clone());
    let inter = probs.mul(&g)?.sum_axes(&axes)?;
    let denom = probs.sum_axes(&axes)?.add(&g.sum_axes(&axes)?)?.add_scalar(DICE_EPS);
    let dice = inter.mul_scalar(2.0).add_scalar(DICE_EPS).div(&denom)?;
    let fg = dice.narrow(1, from, s[1] - from)?;
    Ok(fg.mean_all().one_minus())
}

/// Dice loss on raw logits: softmax over classes, background excluded.
pub fn dice_loss(logits: &Var, target: &Tensor) -> Result<Var> {
    soft_dice_loss(&logits.softmax(1)?, target, 1)
}
