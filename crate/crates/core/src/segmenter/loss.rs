//! Softplus-based binary cross-entropy on logits.

use super::{Click, LogitMap, Mask};
use crate::error::Result;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// BCE between `sigmoid(logit)` and a target in `{0, 1}`.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    target * softplus(-logit) + (1.0 - target) * softplus(logit)
}

/// Sum of per-click BCE at the clicked pixels.
pub fn pixel_loss(logits: &LogitMap, clicks: &[Click]) -> f64 {
    clicks
        .iter()
        .map(|c| bce_with_logit(logits.get(c.x as usize, c.y as usize), c.sign.label()))
        .sum()
}

/// Mean per-pixel BCE against a binary target.
pub fn mask_bce_loss(logits: &LogitMap, target: &Mask) -> Result<f64> {
    check_shape(logits, target)?;
    let total: f64 = logits
        .values
        .iter()
        .zip(target.bits())
        .map(|(&l, &t)| bce_with_logit(l, if t { 1.0 } else { 0.0 }))
        .sum();
    Ok(total / logits.values.len() as f64)
}

/// Mask term plus pixel term, both on the same logits.
pub fn tta_loss(logits: &LogitMap, target: &Mask, clicks: &[Click]) -> Result<f64> {
    Ok(mask_bce_loss(logits, target)? + pixel_loss(logits, clicks))
}

pub(super) fn check_shape(logits: &LogitMap, target: &Mask) -> Result<()> {
    if logits.width != target.width() || logits.height != target.height() {
        return Err(crate::Error::Structural(format!(
            "logits {}x{} vs target {}x{}",
            logits.width,
            logits.height,
            target.width(),
            target.height()
        )));
    }
    Ok(())
}
