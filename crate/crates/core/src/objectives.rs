//! Segmentation cross-entropy, normalized target entropy, masked
//! reconstruction error and their weighted total.
//!
//! Predictions are `pixels x classes` matrices of per-pixel distributions.
//! The `*_grad` kernels return the derivative of the loss with respect to the
//! matrix they consume and are shared with the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{cst, Mat, Scalar};
use crate::patchseq::{MaskPlan, PatchGrid};
use crate::raster::{ImageTensor, IGNORE};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_da: f64,
    pub lambda_mae: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_da: 1.0,
            lambda_mae: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_da: f64, lambda_mae: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_da,
            lambda_mae,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_da", self.lambda_da), ("lambda_mae", self.lambda_mae)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss record; serialized one object per line into the run log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub da: f64,
    pub mae: f64,
    pub total: f64,
    pub seg_pixels: usize,
    pub da_pixels: usize,
    pub mae_pixels: usize,
}

/// The three loss terms before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub seg: f64,
    pub da: f64,
    pub mae: f64,
    pub seg_pixels: usize,
    pub da_pixels: usize,
    pub mae_pixels: usize,
}

// ---------------------------------------------------------------------------
// kernels

pub(crate) fn ce_value<T: Scalar>(pred: &Mat<T>, labels: &[i32]) -> Result<(T, usize)> {
    if labels.len() != pred.rows {
        return Err(Error::Shape(format!("{} labels for {} pixels", labels.len(), pred.rows)));
    }
    let floor = cst::<T>(PROB_FLOOR);
    let mut sum = T::zero();
    let mut count = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if y < 0 || y as usize >= pred.cols {
            return Err(Error::Shape(format!("label {y} outside {} classes", pred.cols)));
        }
        sum = sum - pred.at(r, y as usize).max(floor).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    Ok((sum / cst(count as f64), count))
}

pub(crate) fn ce_grad<T: Scalar>(pred: &Mat<T>, labels: &[i32], count: usize, upstream: T) -> Mat<T> {
    let floor = cst::<T>(PROB_FLOOR);
    let scale = upstream / cst(count as f64);
    let mut g = Mat::zeros(pred.rows, pred.cols);
    for (r, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let p = pred.at(r, y as usize);
        if p > floor {
            g.set(r, y as usize, -scale / p);
        }
    }
    g
}

pub(crate) fn entropy_value<T: Scalar>(pred: &Mat<T>) -> Result<T> {
    if pred.cols < 2 {
        return Err(Error::TooFewClasses(pred.cols));
    }
    if pred.rows == 0 {
        return Err(Error::Shape("empty prediction map".into()));
    }
    let floor = cst::<T>(PROB_FLOOR);
    let norm = cst::<T>((pred.cols as f64).ln());
    let total: T = pred.data.iter().map(|&p| -p * p.max(floor).ln()).sum();
    Ok(total / (norm * cst(pred.rows as f64)))
}

pub(crate) fn entropy_grad<T: Scalar>(pred: &Mat<T>, upstream: T) -> Mat<T> {
    let floor = cst::<T>(PROB_FLOOR);
    let scale = upstream / (cst::<T>((pred.cols as f64).ln()) * cst(pred.rows as f64));
    Mat {
        rows: pred.rows,
        cols: pred.cols,
        data: pred
            .data
            .iter()
            .map(|&p| {
                let d = if p > floor { -(p.ln() + T::one()) } else { -floor.ln() };
                d * scale
            })
            .collect(),
    }
}

/// Masked mean of per-pixel squared error divided by channel count.
/// Returns `(value, masked pixel count)`; value is zero when nothing is masked.
pub(crate) fn mse_value<T: Scalar>(recon: &Mat<T>, target: &Mat<T>, masked: &[bool]) -> Result<(T, usize)> {
    if recon.rows != target.rows || recon.cols != target.cols || masked.len() != recon.rows {
        return Err(Error::Shape(format!(
            "reconstruction {}x{} vs target {}x{} with {} mask flags",
            recon.rows,
            recon.cols,
            target.rows,
            target.cols,
            masked.len()
        )));
    }
    let c = recon.cols;
    let mut sum = T::zero();
    let mut count = 0usize;
    for (r, &m) in masked.iter().enumerate() {
        if !m {
            continue;
        }
        count += 1;
        let mut s = T::zero();
        for j in 0..c {
            let e = recon.data[r * c + j] - target.data[r * c + j];
            s = s + e * e;
        }
        sum = sum + s / cst(c as f64);
    }
    if count == 0 {
        return Ok((T::zero(), 0));
    }
    Ok((sum / cst(count as f64), count))
}

pub(crate) fn mse_grad<T: Scalar>(recon: &Mat<T>, target: &Mat<T>, masked: &[bool], count: usize, upstream: T) -> Mat<T> {
    let mut g = Mat::zeros(recon.rows, recon.cols);
    if count == 0 {
        return g;
    }
    let c = recon.cols;
    let scale = upstream * cst(2.0) / (cst::<T>(c as f64) * cst(count as f64));
    for (r, &m) in masked.iter().enumerate() {
        if m {
            for j in 0..c {
                g.data[r * c + j] = scale * (recon.data[r * c + j] - target.data[r * c + j]);
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// public losses

/// Mean over labeled pixels of `-ln p[y]`; [`IGNORE`] pixels are skipped.
pub fn seg_loss<T: Scalar>(pred: &Mat<T>, labels: &[i32]) -> Result<f64> {
    let (v, _) = ce_value(pred, labels)?;
    Ok(v.to_f64().unwrap_or(f64::NAN))
}

/// Pixel-mean Shannon entropy normalized by `ln(classes)`; lies in `[0, 1]`.
pub fn da_loss<T: Scalar>(pred: &Mat<T>) -> Result<f64> {
    Ok(entropy_value(pred)?.to_f64().unwrap_or(f64::NAN))
}

/// Outcome of [`mae_loss`]; `no_masked_patches` flags the degenerate ρ = 0 case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaeLoss {
    pub value: f64,
    pub masked_pixels: usize,
    pub no_masked_patches: bool,
}

/// Per-pixel mask over the cropped grid area: true inside masked patches.
pub fn masked_pixel_flags(plan: &MaskPlan, grid: &PatchGrid) -> Vec<bool> {
    let (h, w) = (grid.crop_height(), grid.crop_width());
    let mut flags = vec![false; h * w];
    for &id in &plan.masked_ids {
        let (gy, gx) = (id / grid.grid_w, id % grid.grid_w);
        for py in 0..grid.patch {
            let row = (gy * grid.patch + py) * w + gx * grid.patch;
            flags[row..row + grid.patch].iter_mut().for_each(|f| *f = true);
        }
    }
    flags
}

/// Mean over pixels inside masked patches of `||recon - target||^2 / C`.
/// Both images are cropped to the grid area first.
pub fn mae_loss(recon: &ImageTensor, target: &ImageTensor, plan: &MaskPlan, grid: &PatchGrid) -> Result<MaeLoss> {
    if recon.channels != target.channels || recon.height != target.height || recon.width != target.width {
        return Err(Error::Shape("reconstruction and target differ in shape".into()));
    }
    if recon.height < grid.crop_height() || recon.width < grid.crop_width() {
        return Err(Error::Shape("image smaller than the patch grid".into()));
    }
    let (h, w) = (grid.crop_height(), grid.crop_width());
    let flags = masked_pixel_flags(plan, grid);
    let (v, count) = mse_value::<f64>(&recon.to_channel_last(h, w), &target.to_channel_last(h, w), &flags)?;
    if count == 0 {
        log::warn!("mae_loss: no masked patches, loss defined as 0");
    }
    Ok(MaeLoss {
        value: v,
        masked_pixels: count,
        no_masked_patches: count == 0,
    })
}

/// Weighted total `seg + λ_DA·da + λ_MAE·mae`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("seg", parts.seg), ("da", parts.da), ("mae", parts.mae)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    Ok(LossBreakdown {
        seg: parts.seg,
        da: parts.da,
        mae: parts.mae,
        total: parts.seg + weights.lambda_da * parts.da + weights.lambda_mae * parts.mae,
        seg_pixels: parts.seg_pixels,
        da_pixels: parts.da_pixels,
        mae_pixels: parts.mae_pixels,
    })
}
