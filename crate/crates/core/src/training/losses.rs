//! Differentiable losses on batched magnitude images `(b, m, n)`.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::metrics::{SSIM_K1, SSIM_K2, SSIM_WINDOW};
use crate::networks::conv::conv2d;
use crate::networks::Reconstructor;
use crate::ops::{safe_sqrt, scalar, CenteredDft};

use super::batch::Batch;

/// Log terms of the cross-entropy are clamped from below at this value.
pub const LOG_FLOOR: f64 = -100.0;

fn per_image_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum(D::Minus1)?.sum(D::Minus1)?)
}

fn check_same(x: &Tensor, gt: &Tensor) -> Result<()> {
    if x.dims() != gt.dims() || x.rank() != 3 {
        return Err(Error::shape(format!("(b, m, n) {:?}", gt.dims()), format!("{:?}", x.dims())));
    }
    Ok(())
}

/// `||x - gt|| / ||gt||` for every image, shape `(b,)`.
pub fn nrmse_per_image(x: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(x, gt)?;
    let num = safe_sqrt(&per_image_sum(&(x - gt)?.sqr()?)?)?;
    let den = per_image_sum(&gt.sqr()?)?.sqrt()?.detach();
    Ok((num / den)?)
}

/// Batch mean of the per-image NRMSE.
pub fn nrmse(x: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(nrmse_per_image(x, gt)?.mean_all()?)
}

/// Batch mean of the per-image squared error `||x - gt||^2`.
pub fn l2(x: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(x, gt)?;
    Ok(per_image_sum(&(x - gt)?.sqr()?)?.mean_all()?)
}

/// Mean binary cross-entropy of predictions `p` against targets `t`.
pub fn bce(p: &Tensor, t: &Tensor) -> Result<Tensor> {
    if p.dims() != t.dims() {
        return Err(Error::shape(format!("{:?}", t.dims()), format!("{:?}", p.dims())));
    }
    let log_p = p.log()?.maximum(LOG_FLOOR)?;
    let log_q = p.affine(-1.0, 1.0)?.log()?.maximum(LOG_FLOOR)?;
    let pos = (t * log_p)?;
    let neg = (t.affine(-1.0, 1.0)? * log_q)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// `bce(sigmoid(logits), t)` evaluated stably from the logits.
pub fn bce_with_logits(logits: &Tensor, t: &Tensor) -> Result<Tensor> {
    if logits.dims() != t.dims() {
        return Err(Error::shape(format!("{:?}", t.dims()), format!("{:?}", logits.dims())));
    }
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * t)?)? + softplus)?.mean_all()?)
}

/// Per-image SSIM with the same window, constants and dynamic range
/// (`max(gt)`) as the scalar metric; shape `(b,)`.
pub fn ssim_per_image(x: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(x, gt)?;
    let (b, m, n) = x.dims3()?;
    let w = SSIM_WINDOW.min(m).min(n);
    let count = (w * w) as f64;
    let cov_norm = if w > 1 { count / (count - 1.0) } else { 1.0 };
    let range = gt.max(D::Minus1)?.max(D::Minus1)?.detach();
    let range = range.gt(0.0)?.where_cond(&range, &range.ones_like()?)?.reshape((b, 1, 1))?;
    let c1 = (range.sqr()? * SSIM_K1.powi(2))?;
    let c2 = (range.sqr()? * SSIM_K2.powi(2))?;

    let stack = Tensor::cat(&[x, gt, &x.sqr()?, &gt.sqr()?, &(x * gt)?], 0)?.unsqueeze(1)?;
    let kernel = Tensor::full(1.0 / count, (1, 1, w, w), x.device())?.to_dtype(x.dtype())?;
    let means = conv2d(&stack, &kernel, 0)?.squeeze(1)?;
    let part = |i: usize| means.narrow(0, i * b, b);
    let (ux, uy, uxx, uyy, uxy) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let vx = ((uxx - ux.sqr()?)? * cov_norm)?;
    let vy = ((uyy - uy.sqr()?)? * cov_norm)?;
    let vxy = ((uxy - (&ux * &uy)?)? * cov_norm)?;
    let num = ((((&ux * &uy)? * 2.0)?.broadcast_add(&c1)?) * ((vxy * 2.0)?.broadcast_add(&c2)?))?;
    let den = (((ux.sqr()? + uy.sqr()?)?.broadcast_add(&c1)?) * ((vx + vy)?.broadcast_add(&c2)?))?;
    Ok((num / den)?.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Loss for separately trained reconstructors: `NRMSE - w * SSIM`, batch mean.
pub fn separate_loss(x: &Tensor, gt: &Tensor, ssim_weight: f64) -> Result<Tensor> {
    let fidelity = nrmse(x, gt)?;
    if ssim_weight == 0.0 {
        return Ok(fidelity);
    }
    Ok((fidelity - (ssim_per_image(x, gt)?.mean_all()? * ssim_weight)?)?)
}

/// Terms of the mask-backward objective; every tensor is a scalar.
#[derive(Debug, Clone)]
pub struct MbLoss {
    pub total: Tensor,
    pub fidelity: Tensor,
    pub sparsity: Tensor,
    pub consistency: Option<Tensor>,
}

/// `NRMSE(x, gt) + alpha * ||M||_1 + lambda * BCE(q, M)`.
///
/// `soft` holds the current soft masks `M` of shape `(b, h)`; the l1 norm is
/// summed per image and averaged over the batch. `predicted` is the mask
/// predictor's normalized soft output `q` for the same rows, treated as a
/// constant; the term is skipped when it is absent.
pub fn mb_loss(x: &Tensor, gt: &Tensor, soft: &Tensor, predicted: Option<&Tensor>, alpha: f64, lambda: f64) -> Result<MbLoss> {
    if alpha < 0.0 || lambda < 0.0 {
        return Err(Error::validation("loss weights must be non-negative"));
    }
    let fidelity = nrmse(x, gt)?;
    let sparsity = soft.sum(D::Minus1)?.mean_all()?;
    let mut total = (&fidelity + (&sparsity * alpha)?)?;
    let consistency = match predicted {
        Some(q) => {
            let c = bce(&q.detach(), soft)?;
            total = (total + (&c * lambda)?)?;
            Some(c)
        }
        None => None,
    };
    Ok(MbLoss {
        total,
        fidelity,
        sparsity,
        consistency,
    })
}

/// Batch-mean quality `-NRMSE` of `recon` on the batch measured with `masks` `(b, m)`.
pub fn quality(recon: &dyn Reconstructor, masks: &Tensor, batch: &Batch, dft: &CenteredDft) -> Result<f64> {
    let masks = masks.detach();
    let x = recon.reconstruct(&batch.measure(&masks)?, &masks, dft)?.detach();
    Ok(-scalar(&nrmse(&x, &batch.target)?.to_dtype(DType::F64)?)?)
}

/// Per-image quality values, same conventions as [`quality`].
pub fn quality_per_image(recon: &dyn Reconstructor, masks: &Tensor, batch: &Batch, dft: &CenteredDft) -> Result<Vec<f64>> {
    let masks = masks.detach();
    let x = recon.reconstruct(&batch.measure(&masks)?, &masks, dft)?.detach();
    let q: Vec<f64> = nrmse_per_image(&x, &batch.target)?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(q.into_iter().map(|v| -v).collect())
}
