//! Reconstructor warm-up and separate training against a frozen sampler.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Slice;
use crate::error::{Error, Result};
use crate::masks::make_prob_mask;
use crate::networks::Reconstructor;
use crate::ops::{scalar, CenteredDft};

use super::batch::{epoch_batches, make_batch, masks_to_tensor, Batch};
use super::events::{EventLog, TrainEvent};
use super::losses::{nrmse, separate_loss};
use super::optim::{Plateau, RmsProp};
use super::sampling::MaskSource;

/// Per-epoch mask stream, independent of the batch-order stream.
fn mask_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn params_of(recon: &dyn Reconstructor) -> Result<&crate::params::ParamStore> {
    recon
        .params()
        .ok_or_else(|| Error::Config(format!("{} reconstructor has no trainable parameters", recon.kind())))
}

fn finite(loss: &Tensor, what: &str, epoch: usize, batch: usize) -> Result<f64> {
    let v = scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Training(format!("non-finite {what} loss at epoch {epoch}, batch {batch}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 5e-4,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Mask geometry shared by the trainers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub m: usize,
    pub l: usize,
    pub b: usize,
}

/// Trains `recon` to de-alias zero-filled inputs under fresh
/// variable-density random masks (rows drawn proportionally to `density`)
/// on every batch, with an NRMSE loss. Epochs before `start_epoch` are
/// skipped so a resumed run continues the same streams. Returns the mean
/// training loss of every epoch run.
#[allow(clippy::too_many_arguments)]
pub fn warmup_reconstructor(
    recon: &dyn Reconstructor,
    opt: &mut RmsProp,
    train: &[Slice],
    density: &[f64],
    budget: Budget,
    cfg: &WarmupConfig,
    start_epoch: usize,
    dft: &CenteredDft,
    log: &mut EventLog,
    on_epoch: &mut dyn FnMut(usize, &RmsProp) -> Result<()>,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::validation("warm-up needs a non-empty dataset"));
    }
    let store = params_of(recon)?;
    let (dtype, device) = (store.dtype(), store.device().clone());
    let mut losses = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut rng = mask_rng(cfg.seed, epoch);
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for (i, idx) in batches.iter().enumerate() {
            let batch = make_batch(train, idx, dtype, &device)?;
            let masks = (0..batch.len())
                .map(|_| make_prob_mask(budget.m, budget.l, budget.b, density, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mask = masks_to_tensor(&masks, dtype, &device)?;
            let loss = nrmse(&recon.reconstruct(&batch.measure(&mask)?, &mask, dft)?, &batch.target)?;
            total += finite(&loss, "warm-up", epoch, i)?;
            opt.step(&loss.backward()?)?;
        }
        let mean = total / batches.len() as f64;
        log.push(TrainEvent::Epoch {
            stage: "warmup".into(),
            epoch,
            train_loss: mean,
            val_loss: None,
            lr: opt.lr(),
            sampling_ratio: None,
        })?;
        losses.push(mean);
        on_epoch(epoch, opt)?;
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparateTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Weight of the subtracted SSIM term; 0 leaves plain NRMSE.
    pub ssim_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SeparateTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 1e-5,
            patience: 5,
            factor: 0.8,
            min_lr: 1e-6,
            ssim_weight: 5.0,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeparateSummary {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr: Vec<f64>,
}

fn sampled(sampler: &dyn MaskSource, batch: &Batch) -> Result<Tensor> {
    let dtype = batch.target.dtype();
    masks_to_tensor(&sampler.masks(batch)?, dtype, batch.target.device())
}

/// Mean separate-training loss over `slices` without gradient updates.
pub fn separate_val_loss(
    sampler: &dyn MaskSource,
    recon: &dyn Reconstructor,
    slices: &[Slice],
    cfg: &SeparateTrainConfig,
    dft: &CenteredDft,
) -> Result<f64> {
    let store = params_of(recon)?;
    let (mut total, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..slices.len()).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let batch = make_batch(slices, chunk, store.dtype(), store.device())?;
        let mask = sampled(sampler, &batch)?;
        let x = recon.reconstruct(&batch.measure(&mask)?, &mask, dft)?.detach();
        total += scalar(&separate_loss(&x, &batch.target, cfg.ssim_weight)?)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

impl SeparateTrainConfig {
    pub fn plateau(&self) -> Plateau {
        Plateau::new(self.patience, self.factor, self.min_lr)
    }
}

/// Trains a reconstructor on data masked by a frozen sampler, reducing the
/// learning rate when the validation loss plateaus (the training loss is
/// used when `val` is empty).
#[allow(clippy::too_many_arguments)]
pub fn train_separate_reconstructor(
    sampler: &dyn MaskSource,
    recon: &dyn Reconstructor,
    opt: &mut RmsProp,
    plateau: &mut Plateau,
    train: &[Slice],
    val: &[Slice],
    cfg: &SeparateTrainConfig,
    start_epoch: usize,
    dft: &CenteredDft,
    log: &mut EventLog,
    on_epoch: &mut dyn FnMut(usize, &RmsProp, &Plateau) -> Result<()>,
) -> Result<SeparateSummary> {
    if train.is_empty() {
        return Err(Error::validation("separate training needs a non-empty dataset"));
    }
    let store = params_of(recon)?;
    let (dtype, device) = (store.dtype(), store.device().clone());
    let mut summary = SeparateSummary::default();
    for epoch in start_epoch..cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let mut total = 0.0;
        for (i, idx) in batches.iter().enumerate() {
            let batch = make_batch(train, idx, dtype, &device)?;
            let mask = sampled(sampler, &batch)?;
            let x = recon.reconstruct(&batch.measure(&mask)?, &mask, dft)?;
            let loss = separate_loss(&x, &batch.target, cfg.ssim_weight)?;
            total += finite(&loss, "reconstruction", epoch, i)?;
            opt.step(&loss.backward()?)?;
        }
        let train_loss = total / batches.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(separate_val_loss(sampler, recon, val, cfg, dft)?)
        };
        log.push(TrainEvent::Epoch {
            stage: "recon".into(),
            epoch,
            train_loss,
            val_loss,
            lr: opt.lr(),
            sampling_ratio: None,
        })?;
        if let Some(lr) = plateau.observe(val_loss.unwrap_or(train_loss), opt) {
            log.push(TrainEvent::LrReduced {
                stage: "recon".into(),
                epoch,
                lr,
            })?;
        }
        summary.train_loss.push(train_loss);
        summary.val_loss.extend(val_loss);
        summary.lr.push(opt.lr());
        on_epoch(epoch, opt, plateau)?;
    }
    Ok(summary)
}
