//! Masked self-supervised losses evaluated directly on images. The training
//! graph builds the same quantities from [`BlindSpotMask::loss_weights`].

use crate::error::{Error, Result};
use crate::nets::{smoothness_penalty, BlindSpotMask, DeformationField};
use crate::pipeline::TrainConfig;
use crate::Image;

fn check_dim(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared residual over the dropped pixels of `mask`; zero when the
/// mask drops nothing.
fn masked_mse(estimate: &Image, reference: &Image, mask: &BlindSpotMask) -> Result<f64> {
    check_dim(estimate, reference, "masked loss")?;
    check_dim(estimate, mask.mask(), "masked loss mask")?;
    let dropped = mask.dropped();
    if dropped == 0 {
        return Ok(0.0);
    }
    let sum: f64 = estimate
        .iter()
        .zip(reference)
        .zip(mask.mask())
        .filter(|(_, b)| **b == 0.0)
        .map(|((e, r), _)| (*e as f64 - *r as f64).powi(2))
        .sum();
    Ok(sum / dropped as f64)
}

/// Single-frame blind-spot loss averaged over the `N + 1` frames.
pub fn loss_single(outputs: &[Image], noisy: &[Image], masks: &[BlindSpotMask]) -> Result<f64> {
    if outputs.len() != noisy.len() || outputs.len() != masks.len() || outputs.is_empty() {
        return Err(Error::invalid(format!(
            "loss_single needs matching non-empty lists: {} outputs, {} frames, {} masks",
            outputs.len(),
            noisy.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for ((x, y), b) in outputs.iter().zip(noisy).zip(masks) {
        total += masked_mse(x, y, b)?;
    }
    Ok(total / outputs.len() as f64)
}

/// Registration loss: image similarity of each aligned frame to the target
/// plus `lambda_smooth` times the field smoothness penalty, averaged over
/// the auxiliary frames.
pub fn loss_registration(
    warped: &[Image],
    target: &Image,
    fields: &[DeformationField],
    lambda_smooth: f64,
) -> Result<f64> {
    if warped.len() != fields.len() || warped.is_empty() {
        return Err(Error::invalid(format!(
            "loss_registration needs one field per warped frame: {} vs {}",
            warped.len(),
            fields.len()
        )));
    }
    let mut total = 0.0;
    for (w, f) in warped.iter().zip(fields) {
        check_dim(w, target, "registration loss")?;
        let mse = w
            .iter()
            .zip(target)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / w.len() as f64;
        total += mse + lambda_smooth * smoothness_penalty(f);
    }
    Ok(total / warped.len() as f64)
}

/// Multi-frame blind-spot loss on the target frame.
pub fn loss_multi(estimate: &Image, target_noisy: &Image, mask: &BlindSpotMask) -> Result<f64> {
    masked_mse(estimate, target_noisy, mask)
}

pub fn total_loss(l_s: f64, l_r: f64, l_m: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_s * l_s + cfg.lambda_r * l_r + l_m
}
