use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Slice;
use crate::error::{Error, Result};
use crate::masks::{make_random_mask, BinaryMask};
use crate::networks::{MnetModel, Reconstructor};
use crate::ops::{normalize_budget, rows_to_tensor, scalar, sigmoid, tensor_to_rows, CenteredDft};
use crate::params::{ParamStore, Snapshot};

use super::batch::{epoch_batches, make_batch, masks_to_tensor, Batch};
use super::events::{EventLog, GateRecord, TrainEvent};
use super::losses::{bce_with_logits, quality};
use super::mask_backward::{mask_backward, MaskBackwardConfig};
use super::optim::{RmsProp, RmsState};
use crate::masks::enforce_budget_high_freq;

/// Geometric grid of sparsity weights the controller moves along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    /// Ascending.
    pub values: Vec<f64>,
    /// Starting weight; need not lie on the grid.
    pub alpha0: f64,
}

impl AlphaGrid {
    /// `10^lo, 10^(lo + step), ...` up to `10^hi` inclusive.
    pub fn geometric(lo: f64, hi: f64, step: f64, alpha0: f64) -> Result<Self> {
        if !(step > 0.0 && hi >= lo && alpha0 > 0.0) {
            return Err(Error::Config("alpha grid needs lo <= hi, a positive step and alpha0 > 0".into()));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok(Self {
            values: (0..count).map(|k| 10f64.powf(lo + k as f64 * step)).collect(),
            alpha0,
        })
    }

    /// Grid for an acceleration factor of 4 or 8.
    pub fn for_acceleration(accel: u32) -> Result<Self> {
        match accel {
            4 => Self::geometric(-5.7, -3.9, 0.2, 2e-5),
            8 => Self::geometric(-5.01, -3.61, 0.2, 2e-5),
            _ => Err(Error::Config(format!("no alpha grid for acceleration {accel}"))),
        }
    }

    /// The grid and starting weight multiplied by `10^decades`.
    pub fn shifted(&self, decades: f64) -> Self {
        let f = 10f64.powf(decades);
        Self {
            values: self.values.iter().map(|v| v * f).collect(),
            alpha0: self.alpha0 * f,
        }
    }

    fn above(&self, alpha: f64) -> Option<usize> {
        self.values.iter().position(|&v| v > alpha * (1.0 + 1e-9))
    }

    fn below(&self, alpha: f64) -> Option<usize> {
        self.values.iter().rposition(|&v| v < alpha * (1.0 - 1e-9))
    }

    /// Next grid value above `alpha`.
    pub fn step_up(&self, alpha: f64) -> Option<f64> {
        self.above(alpha).map(|i| self.values[i])
    }

    /// Next grid value below `alpha`.
    pub fn step_down(&self, alpha: f64) -> Option<f64> {
        self.below(alpha).map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlternatingConfig {
    pub epochs: usize,
    /// Mask-predictor updates per accepted batch.
    pub mnet_steps: usize,
    pub lr_mnet: f64,
    pub batch_size: usize,
    /// Cap on retries of one batch with a new sparsity weight.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for AlternatingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            mnet_steps: 40,
            lr_mnet: 5e-4,
            batch_size: 8,
            max_retries: 20,
            seed: 0,
        }
    }
}

impl AlternatingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mnet_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("mask-predictor steps and batch size must be positive".into()));
        }
        if !(self.lr_mnet > 0.0) {
            return Err(Error::Config("mask-predictor learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Size of the largest group of identical masks.
fn largest_repeat(masks: &[BinaryMask]) -> usize {
    let mut rows: Vec<&[u8]> = masks.iter().map(|m| m.rows()).collect();
    rows.sort();
    rows.chunk_by(|a, b| a == b).map(|g| g.len()).max().unwrap_or(0)
}

/// More than half of a batch (of at least two images) shares one mask.
pub fn is_repetitive(masks: &[BinaryMask]) -> bool {
    masks.len() > 1 && 2 * largest_repeat(masks) > masks.len()
}

/// Refined masks are not repetitive and at least one differs from its start.
pub fn is_adaptive(refined: &[BinaryMask], init: &[BinaryMask]) -> bool {
    !is_repetitive(refined) && refined.iter().zip(init).any(|(a, b)| a != b)
}

/// What happened to one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchOutcome {
    Accepted { labels: Vec<BinaryMask>, attempts: usize },
    Skipped { attempts: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlternatingSummary {
    pub accepted: usize,
    pub skipped: usize,
    pub attempts: usize,
    pub mnet_steps: usize,
    pub final_alpha: f64,
}

/// Training state of the alternating framework: the mask predictor, the
/// co-trained reconstructor, the frozen initial reconstructor that judges
/// random masks, both optimizers and the current sparsity weight.
pub struct Alternating<'a> {
    pub mnet: &'a MnetModel,
    pub recon: &'a dyn Reconstructor,
    pub u0: &'a dyn Reconstructor,
    pub cfg: AlternatingConfig,
    pub mb: MaskBackwardConfig,
    pub grid: AlphaGrid,
    mnet_opt: RmsProp,
    recon_opt: RmsProp,
    alpha: f64,
}

const MNET_OPT_FILE: &str = "mnet_opt.safetensors";
const RECON_OPT_FILE: &str = "recon_opt.safetensors";
const STATE_FILE: &str = "alternating.json";

#[derive(Serialize, Deserialize)]
struct SavedState {
    alpha: f64,
}

fn trainable(recon: &dyn Reconstructor) -> Result<&ParamStore> {
    recon
        .params()
        .ok_or_else(|| Error::Config(format!("{} reconstructor has no trainable parameters", recon.kind())))
}

impl<'a> Alternating<'a> {
    pub fn new(
        mnet: &'a MnetModel,
        recon: &'a dyn Reconstructor,
        u0: &'a dyn Reconstructor,
        cfg: AlternatingConfig,
        mb: MaskBackwardConfig,
        grid: AlphaGrid,
    ) -> Result<Self> {
        cfg.validate()?;
        mb.validate()?;
        let mc = mnet.config();
        if (mc.m, mc.l) != (mb.m, mb.l) {
            return Err(Error::Config("mask predictor and mask-backward grids differ".into()));
        }
        Ok(Self {
            mnet_opt: RmsProp::for_store(mnet.store(), cfg.lr_mnet)?,
            recon_opt: RmsProp::for_store(trainable(recon)?, mb.lr_recon)?,
            alpha: grid.alpha0,
            mnet,
            recon,
            u0,
            cfg,
            mb,
            grid,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Writes the optimizer states and the current sparsity weight.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.mnet_opt.save(&dir.join(MNET_OPT_FILE))?;
        self.recon_opt.save(&dir.join(RECON_OPT_FILE))?;
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_string(&SavedState { alpha: self.alpha })?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_state(&mut self, dir: &Path) -> Result<()> {
        self.mnet_opt.load(&dir.join(MNET_OPT_FILE))?;
        self.recon_opt.load(&dir.join(RECON_OPT_FILE))?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        self.alpha = serde_json::from_str::<SavedState>(&text)?.alpha;
        Ok(())
    }

    fn snapshot(&self) -> Result<(Snapshot, RmsState)> {
        Ok((trainable(self.recon)?.snapshot()?, self.recon_opt.state()))
    }

    fn rollback(&mut self, snap: &(Snapshot, RmsState)) -> Result<()> {
        trainable(self.recon)?.restore(&snap.0)?;
        self.recon_opt.restore(&snap.1)
    }

    fn random_masks(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BinaryMask>> {
        (0..count)
            .map(|_| make_random_mask(self.mb.m, self.mb.l, self.mb.b, rng))
            .collect()
    }

    /// Supervised predictor updates towards the refined binary labels;
    /// returns the first and last loss.
    fn fit_mnet(&mut self, z: &candle_core::Tensor, labels: &[BinaryMask]) -> Result<(f64, f64)> {
        let rows: Vec<Vec<f64>> = labels.iter().map(|m| m.high_freq().iter().map(|&v| v as f64).collect()).collect();
        let target = rows_to_tensor(&rows, z.dtype(), z.device())?;
        let (mut first, mut last) = (f64::NAN, f64::NAN);
        for step in 0..self.cfg.mnet_steps {
            let loss = bce_with_logits(&self.mnet.logits(z)?, &target)?;
            last = scalar(&loss)?;
            if step == 0 {
                first = last;
            }
            if !last.is_finite() {
                return Err(Error::Training(format!("non-finite mask-predictor loss at step {step}")));
            }
            self.mnet_opt.step(&loss.backward()?)?;
        }
        Ok((first, last))
    }

    /// One pass of the framework over a batch, with sparsity-weight retries.
    pub fn run_batch(&mut self, batch: &Batch, epoch: usize, index: usize, dft: &CenteredDft, log: &mut EventLog) -> Result<BatchOutcome> {
        let (m, l, b) = (self.mb.m, self.mb.l, self.mb.b);
        let z = self.mnet.observe(&batch.kspace)?;
        let soft = sigmoid(&self.mnet.logits(&z)?.detach())?;
        let predicted_masks = tensor_to_rows(&soft)?
            .iter()
            .map(|row| enforce_budget_high_freq(row, l, b, m))
            .collect::<Result<Vec<_>>>()?;
        let consistency = normalize_budget(&soft, self.mb.target_ratio())?.detach();
        // one stream per batch, so a resumed run draws the same masks
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((epoch as u64) << 32) | index as u64);
        let random = self.random_masks(batch.len(), &mut rng)?;
        let random_init = is_repetitive(&predicted_masks);
        let init = if random_init {
            self.random_masks(batch.len(), &mut rng)?
        } else {
            predicted_masks.clone()
        };
        let dtype = batch.target.dtype();
        let device = batch.target.device().clone();
        let q_random = quality(self.u0, &masks_to_tensor(&random, dtype, &device)?, batch, dft)?;
        let predicted_t = masks_to_tensor(&predicted_masks, dtype, &device)?;

        let snap = self.snapshot()?;
        let mut visited = vec![self.alpha];
        let mut attempt = 0;
        loop {
            let cfg = MaskBackwardConfig { alpha: self.alpha, ..self.mb.clone() };
            let out = mask_backward(batch, &init, self.recon, Some(&mut self.recon_opt), Some(&consistency), &cfg, dft)?;
            let q_refined = quality(self.recon, &masks_to_tensor(&out.masks, dtype, &device)?, batch, dft)?;
            let q_predicted = quality(self.recon, &predicted_t, batch, dft)?;
            let adaptive = is_adaptive(&out.masks, &init);
            let accepted = adaptive && q_refined > q_predicted.max(q_random);
            let mut record = GateRecord {
                epoch,
                batch: index,
                attempt,
                alpha: self.alpha,
                accepted,
                q_refined,
                q_predicted,
                q_random,
                adaptive,
                random_init,
                sampling_ratio: out.sampling_ratio,
                mb_loss_first: out.losses.first().map_or(f64::NAN, |s| s.total),
                mb_loss_last: out.losses.last().map_or(f64::NAN, |s| s.total),
                mnet_steps: 0,
                mnet_loss_first: None,
                mnet_loss_last: None,
            };
            if accepted {
                let (first, last) = self.fit_mnet(&z, &out.masks)?;
                record.mnet_steps = self.cfg.mnet_steps;
                record.mnet_loss_first = Some(first);
                record.mnet_loss_last = Some(last);
                log.push(TrainEvent::Gate(record))?;
                return Ok(BatchOutcome::Accepted {
                    labels: out.masks,
                    attempts: attempt + 1,
                });
            }
            log.push(TrainEvent::Gate(record))?;
            self.rollback(&snap)?;
            // too many rows above threshold: penalize sampling harder
            let next = if out.sampling_ratio > self.mb.target_ratio() {
                self.grid.step_up(self.alpha)
            } else {
                self.grid.step_down(self.alpha)
            };
            attempt += 1;
            let reason = match next {
                None => Some("alpha grid exhausted"),
                Some(a) if visited.iter().any(|&v| (v - a).abs() <= 1e-12 * a) => Some("alpha grid swept"),
                Some(_) if attempt > self.cfg.max_retries => Some("retry limit reached"),
                Some(_) => None,
            };
            if let Some(reason) = reason {
                log.push(TrainEvent::Skipped {
                    epoch,
                    batch: index,
                    reason: reason.into(),
                })?;
                return Ok(BatchOutcome::Skipped { attempts: attempt });
            }
            self.alpha = next.expect("checked above");
            visited.push(self.alpha);
        }
    }
}

/// Runs the alternating framework from `start_epoch` to the configured
/// number of epochs. `on_epoch` is called after every epoch (for checkpoints).
pub fn alternating_train(
    state: &mut Alternating<'_>,
    train: &[Slice],
    start_epoch: usize,
    dft: &CenteredDft,
    log: &mut EventLog,
    on_epoch: &mut dyn FnMut(usize, &Alternating<'_>) -> Result<()>,
) -> Result<AlternatingSummary> {
    if train.is_empty() {
        return Err(Error::validation("alternating training needs a non-empty dataset"));
    }
    let dtype = trainable(state.recon)?.dtype();
    let device = trainable(state.recon)?.device().clone();
    let mut summary = AlternatingSummary::default();
    for epoch in start_epoch..state.cfg.epochs {
        for (index, idx) in epoch_batches(train.len(), state.cfg.batch_size, state.cfg.seed, epoch).iter().enumerate() {
            let batch = make_batch(train, idx, dtype, &device)?;
            match state.run_batch(&batch, epoch, index, dft, log)? {
                BatchOutcome::Accepted { attempts, .. } => {
                    summary.accepted += 1;
                    summary.attempts += attempts;
                    summary.mnet_steps += state.cfg.mnet_steps;
                }
                BatchOutcome::Skipped { attempts } => {
                    summary.skipped += 1;
                    summary.attempts += attempts;
                }
            }
        }
        on_epoch(epoch, state)?;
    }
    summary.final_alpha = state.alpha;
    Ok(summary)
}
