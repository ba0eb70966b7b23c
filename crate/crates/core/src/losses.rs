//! Reconstruction and sparse soft-dice objectives with analytic gradients.

use crate::error::{Error, Result};
use crate::nn::Volume;
use crate::types::{BinaryMask, SparseLabelSet};

/// Smoothing term of the soft dice.
pub const DICE_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_len(dim: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { dim, expected, actual });
    }
    Ok(())
}

/// Mean squared error of one sample and its gradient with respect to `pred`.
pub fn mse_with_grad(target: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("reconstruction elements", target.len(), pred.len())?;
    let n = target.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = target
        .iter()
        .zip(pred)
        .map(|(t, p)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Batch mean of per-sample mean squared errors over `(target, prediction)`.
pub fn reconstruction_loss(batch: &[(&[f64], &[f64])]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (t, p) in batch {
        total += mse_with_grad(t, p)?.0;
    }
    Ok(total / batch.len() as f64)
}

/// `1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps)` on probabilities.
pub fn frame_dice_loss(y: &BinaryMask, p: &[f64]) -> Result<f64> {
    check_len("dice pixels", y.bits().len(), p.len())?;
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("probability {bad} outside [0, 1]")));
    }
    Ok(dice_terms(y.bits(), p).0)
}

/// Loss and `d loss / d p`.
fn dice_terms(y: &[bool], p: &[f64]) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut sy = 0.0;
    let mut sp = 0.0;
    for (&yi, &pi) in y.iter().zip(p) {
        if yi {
            inter += pi;
            sy += 1.0;
        }
        sp += pi;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sy + sp + DICE_EPS;
    let grad = y
        .iter()
        .map(|&yi| {
            let yv = if yi { 1.0 } else { 0.0 };
            -(2.0 * yv * den - num) / (den * den)
        })
        .collect();
    (1.0 - num / den, grad)
}

/// Dice loss of logits against a mask, with the gradient in logit space.
pub fn frame_dice_with_logit_grad(y: &BinaryMask, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("dice pixels", y.bits().len(), logits.len())?;
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (loss, mut g) = dice_terms(y.bits(), &p);
    g.iter_mut().zip(&p).for_each(|(g, p)| *g *= p * (1.0 - p));
    Ok((loss, g))
}

fn check_volume(labels: &SparseLabelSet, v: &Volume) -> Result<()> {
    check_len("prediction channels", 1, v.channels())?;
    check_len("prediction frames", labels.frames(), v.depth())?;
    check_len("prediction height", labels.height(), v.height())?;
    check_len("prediction width", labels.width(), v.width())
}

/// Sum of frame dice losses over labeled slots; `probs` is `[1, F, H, W]`.
pub fn sparse_dice_loss(labels: &SparseLabelSet, probs: &Volume) -> Result<f64> {
    check_volume(labels, probs)?;
    let mut total = 0.0;
    for (slot, mask) in labels.iter() {
        total += frame_dice_loss(mask, probs.plane(0, slot))?;
    }
    Ok(total)
}

/// [`sparse_dice_loss`] from logits, with its logit gradient. Unlabeled
/// slots receive an exactly zero gradient.
pub fn sparse_dice_with_grad(labels: &SparseLabelSet, logits: &Volume) -> Result<(f64, Volume)> {
    check_volume(labels, logits)?;
    let mut grad = Volume::zeros(logits.shape);
    let hw = logits.height() * logits.width();
    let mut total = 0.0;
    for (slot, mask) in labels.iter() {
        let (l, g) = frame_dice_with_logit_grad(mask, logits.plane(0, slot))?;
        total += l;
        grad.data[slot * hw..(slot + 1) * hw].copy_from_slice(&g);
    }
    Ok((total, grad))
}

/// Dice over a volume holding only the labeled frames, in
/// `labels.labeled_slots()` order.
pub fn labeled_only_dice_with_grad(labels: &SparseLabelSet, selected: &Volume) -> Result<(f64, Volume)> {
    check_len("selected frames", labels.len(), selected.depth())?;
    let hw = selected.height() * selected.width();
    let mut grad = Volume::zeros(selected.shape);
    let mut total = 0.0;
    for (k, (_, mask)) in labels.iter().enumerate() {
        let (l, g) = frame_dice_with_logit_grad(mask, selected.plane(0, k))?;
        total += l;
        grad.data[k * hw..(k + 1) * hw].copy_from_slice(&g);
    }
    Ok((total, grad))
}

/// Batch mean of per-clip sparse dice losses.
pub fn total_seg_loss(per_clip: &[f64]) -> Result<f64> {
    if per_clip.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(per_clip.iter().sum::<f64>() / per_clip.len() as f64)
}
