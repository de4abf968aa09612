use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{base_band, enforce_budget_high_freq, init_param_from_binary, BinaryMask, THRESHOLD};
use crate::networks::Reconstructor;
use crate::ops::{scalar, sigmoid, ste_binarize, tensor_to_rows, CenteredDft};

use super::batch::Batch;
use super::losses::mb_loss;
use super::optim::RmsProp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBackwardConfig {
    /// Number of joint gradient steps.
    pub steps: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub lr_recon: f64,
    pub lr_xi: f64,
    pub m: usize,
    pub l: usize,
    pub b: usize,
}

impl MaskBackwardConfig {
    pub fn new(m: usize, l: usize, b: usize) -> Self {
        Self {
            steps: 20,
            alpha: 2e-5,
            lambda: 5e-4,
            lr_recon: 5e-4,
            lr_xi: 5e-3,
            m,
            l,
            b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l + self.b > self.m {
            return Err(Error::Config(format!("base {} plus budget {} exceeds {} rows", self.l, self.b, self.m)));
        }
        if !(self.alpha >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("mask-backward weights must be non-negative".into()));
        }
        if !(self.lr_recon > 0.0 && self.lr_xi > 0.0) {
            return Err(Error::Config("mask-backward learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Target fraction of sampled high-frequency rows.
    pub fn target_ratio(&self) -> f64 {
        self.b as f64 / (self.m - self.l) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub fidelity: f64,
    pub sparsity: f64,
    pub consistency: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MaskBackwardOutcome {
    /// Budget-controlled refined masks, one per image.
    pub masks: Vec<BinaryMask>,
    /// `sigmoid(xi_T)` on the high-frequency rows.
    pub soft: Vec<Vec<f64>>,
    /// Fraction of high-frequency rows at or above the threshold before budget control.
    pub sampling_ratio: f64,
    pub losses: Vec<StepLoss>,
}

/// Builds full-length `(b, m)` masks from high-frequency values by inserting
/// the base band as constant ones.
pub fn with_base_band(hf: &Tensor, m: usize, l: usize) -> Result<Tensor> {
    let (rows, h) = hf.dims2()?;
    if h + l != m {
        return Err(Error::shape(format!("{} high-frequency rows", m - l), h));
    }
    let band = base_band(m, l)?;
    let mut parts = Vec::with_capacity(3);
    if band.start > 0 {
        parts.push(hf.narrow(1, 0, band.start)?);
    }
    if l > 0 {
        parts.push(Tensor::ones((rows, l), hf.dtype(), hf.device())?);
    }
    if band.end < m {
        parts.push(hf.narrow(1, band.start, m - band.end)?);
    }
    Ok(Tensor::cat(&parts, 1)?)
}

/// Jointly refines one mask per image and the reconstructor.
///
/// The logits `xi` live on the high-frequency rows and start at the `+-0.1`
/// pattern of `init`. Every step binarizes `sigmoid(xi)` with a
/// straight-through gradient, reconstructs from the data that mask selects
/// and takes one optimizer step on `xi` and, when `recon_opt` is given, on
/// the reconstructor. `predicted` is the mask predictor's normalized soft
/// output on the same rows, used by the consistency term.
pub fn mask_backward(
    batch: &Batch,
    init: &[BinaryMask],
    recon: &dyn Reconstructor,
    mut recon_opt: Option<&mut RmsProp>,
    predicted: Option<&Tensor>,
    cfg: &MaskBackwardConfig,
    dft: &CenteredDft,
) -> Result<MaskBackwardOutcome> {
    cfg.validate()?;
    let (m, l, b) = (cfg.m, cfg.l, cfg.b);
    if init.len() != batch.len() {
        return Err(Error::validation(format!("{} initial masks for {} images", init.len(), batch.len())));
    }
    if batch.grid().0 != m {
        return Err(Error::shape(format!("{m} k-space rows"), batch.grid().0));
    }
    for mask in init {
        if mask.m() != m || mask.l_base() != l || mask.budget() != b {
            return Err(Error::validation(format!(
                "initial mask (m={}, l={}, b={}) does not match m={m} l={l} b={b}",
                mask.m(),
                mask.l_base(),
                mask.budget()
            )));
        }
    }
    let h = m - l;
    let dtype = batch.target.dtype();
    let device = batch.target.device();
    let xi0: Vec<f64> = init.iter().flat_map(|mk| init_param_from_binary(&mk.high_freq()).xi).collect();
    let xi = Var::from_tensor(&Tensor::from_vec(xi0, (init.len(), h), device)?.to_dtype(dtype)?)?;
    let mut xi_opt = RmsProp::new(vec![("xi".into(), xi.clone())], cfg.lr_xi)?;
    if let Some(q) = predicted {
        if q.dims() != [init.len(), h] {
            return Err(Error::shape(format!("({}, {h}) predicted mask", init.len()), format!("{:?}", q.dims())));
        }
    }

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let soft = sigmoid(xi.as_tensor())?;
        let mask = with_base_band(&ste_binarize(&soft, THRESHOLD)?, m, l)?;
        let x = recon.reconstruct(&batch.measure(&mask)?, &mask, dft)?;
        let loss = mb_loss(&x, &batch.target, &soft, predicted, cfg.alpha, cfg.lambda)?;
        let record = StepLoss {
            total: scalar(&loss.total)?,
            fidelity: scalar(&loss.fidelity)?,
            sparsity: scalar(&loss.sparsity)?,
            consistency: loss.consistency.as_ref().map(scalar).transpose()?,
        };
        if !record.total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite mask-backward loss at step {step}: fidelity {}, sparsity {}, consistency {:?}",
                record.fidelity, record.sparsity, record.consistency
            )));
        }
        losses.push(record);
        let grads = loss.total.backward()?;
        xi_opt.step(&grads)?;
        if let Some(opt) = recon_opt.as_deref_mut() {
            opt.step(&grads)?;
        }
    }

    let soft = tensor_to_rows(&sigmoid(xi.as_tensor())?)?;
    let above = soft.iter().flatten().filter(|&&v| v >= THRESHOLD).count();
    let masks = soft
        .iter()
        .map(|row| enforce_budget_high_freq(row, l, b, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskBackwardOutcome {
        masks,
        sampling_ratio: above as f64 / (soft.len() * h) as f64,
        soft,
        losses,
    })
}
