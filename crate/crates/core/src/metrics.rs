//! Masked reconstruction losses, the trail-energy blur diagnostic and
//! normalized log-depth conversion.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{shape_mismatch, Error, Result};
use crate::masking::{normalize_patches, PatchGrid, TubeMask, DEFAULT_NORM_EPSILON};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskedLossReport {
    pub loss: f64,
    pub masked_patch_count: usize,
    pub per_stage_losses: Vec<f64>,
}

impl MaskedLossReport {
    /// One `stage_index value` line per stage (1-based).
    pub fn to_lines(&self) -> String {
        series_lines(&self.per_stage_losses)
    }
}

/// Formats a series as `index value` lines, indices starting at 1.
pub fn series_lines(values: &[f64]) -> String {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{} {v:.9e}\n", i + 1))
        .collect()
}

/// Mean squared error over the pixels of hidden patches.
///
/// With `normalize_target` the target is patch-normalized first.
pub fn masked_mse(
    prediction: &Array2<f64>,
    target: &Array2<f64>,
    mask: &TubeMask,
    grid: &PatchGrid,
    normalize_target: bool,
) -> Result<f64> {
    if prediction.dim() != target.dim() {
        return Err(shape_mismatch(
            format!("{:?}", target.dim()),
            format!("{:?}", prediction.dim()),
        ));
    }
    let pixels = mask.pixel_mask(grid)?;
    if pixels.dim() != target.dim() {
        return Err(shape_mismatch(
            format!("{}x{}", grid.height, grid.width),
            format!("{:?}", target.dim()),
        ));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let normalized;
    let target = if normalize_target {
        normalized = normalize_patches(target, grid, DEFAULT_NORM_EPSILON)?;
        &normalized
    } else {
        target
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    ndarray::Zip::from(prediction)
        .and(target)
        .and(&pixels)
        .for_each(|&p, &t, &m| {
            if m {
                sum += (p - t) * (p - t);
                n += 1;
            }
        });
    Ok(sum / n as f64)
}

/// Stage-averaged masked MSE against patch-normalized targets.
pub fn sequence_loss(
    predictions: &[Array2<f64>],
    targets: &[Array2<f64>],
    mask: &TubeMask,
    grid: &PatchGrid,
) -> Result<MaskedLossReport> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(shape_mismatch(
            format!("{} stages", targets.len()),
            format!("{} predictions", predictions.len()),
        ));
    }
    let per_stage_losses = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| masked_mse(p, t, mask, grid, true))
        .collect::<Result<Vec<_>>>()?;
    let loss = per_stage_losses.iter().sum::<f64>() / per_stage_losses.len() as f64;
    Ok(MaskedLossReport {
        loss,
        masked_patch_count: mask.count(),
        per_stage_losses,
    })
}

/// Mean absolute frame value over `region`, one entry per frame.
pub fn trail_energy(frames: &[Array2<f32>], region: &Array2<bool>) -> Result<Vec<f64>> {
    let n = region.iter().filter(|&&r| r).count();
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    frames
        .iter()
        .map(|f| {
            if f.dim() != region.dim() {
                return Err(shape_mismatch(format!("{:?}", region.dim()), format!("{:?}", f.dim())));
            }
            let sum: f64 = f
                .iter()
                .zip(region.iter())
                .filter(|(_, &r)| r)
                .map(|(&v, _)| f64::from(v).abs())
                .sum();
            Ok(sum / n as f64)
        })
        .collect()
}

/// Log-depth normalization: `d_hat = ln(d / d_max) / alpha + 1`, so that
/// `d_max -> 1` and `d_min = d_max * exp(-alpha) -> 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthConfig {
    pub d_max: f64,
    pub alpha_depth: f64,
}

impl DepthConfig {
    pub fn new(d_max: f64, alpha_depth: f64) -> Result<Self> {
        if !(d_max > 0.0 && alpha_depth > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "depth config needs d_max > 0 and alpha > 0, got ({d_max}, {alpha_depth})"
            )));
        }
        Ok(Self { d_max, alpha_depth })
    }

    pub fn d_min(&self) -> f64 {
        self.d_max * (-self.alpha_depth).exp()
    }
}

pub fn normalize_depth(d: f64, config: &DepthConfig) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveDepth(d));
    }
    Ok((d / config.d_max).ln() / config.alpha_depth + 1.0)
}

pub fn denormalize_depth(d_hat: f64, config: &DepthConfig) -> f64 {
    config.d_max * ((d_hat - 1.0) * config.alpha_depth).exp()
}
