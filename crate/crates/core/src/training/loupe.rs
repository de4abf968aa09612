//! Probabilistic row-sampling baseline trained jointly with a reconstructor.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Slice;
use crate::error::{Error, Result};
use crate::masks::{enforce_budget_high_freq, high_freq_rows, make_prob_mask, BinaryMask};
use crate::networks::Reconstructor;
use crate::ops::{normalize_budget, scalar, sigmoid, ste_binarize, tensor_to_rows, CenteredDft};
use crate::params::ParamStore;

use super::batch::{epoch_batches, make_batch, Batch};
use super::events::{EventLog, TrainEvent};
use super::losses::l2;
use super::mask_backward::with_base_band;
use super::optim::RmsProp;
use super::recon::Budget;
use super::sampling::{image_seed, MaskSource};

const WEIGHTS: &str = "loupe.w";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoupeConfig {
    pub lr_mask: f64,
    pub lr_recon: f64,
    pub slope: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LoupeConfig {
    fn default() -> Self {
        Self {
            lr_mask: 1e-4,
            lr_recon: 1e-5,
            slope: 1.0,
            epochs: 40,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Learned per-row sampling probabilities over the high-frequency rows.
#[derive(Debug, Clone)]
pub struct LoupeModel {
    pub budget: Budget,
    pub slope: f64,
    store: ParamStore,
}

impl LoupeModel {
    /// All weights start at zero, i.e. every row equally likely.
    pub fn new(budget: Budget, slope: f64, dtype: DType, device: &Device) -> Result<Self> {
        let h = high_freq_rows(budget.m, budget.l)?.len();
        if budget.b == 0 || budget.b >= h {
            return Err(Error::validation(format!("LOUPE budget {} must lie in 1..{h}", budget.b)));
        }
        let mut store = ParamStore::new(dtype, device.clone());
        store.zeros(WEIGHTS, &[1, h])?;
        Ok(Self { budget, slope, store })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn weights(&self) -> Tensor {
        self.store.get(WEIGHTS).expect("created in new").as_tensor().clone()
    }

    pub fn target_ratio(&self) -> f64 {
        self.budget.b as f64 / (self.budget.m - self.budget.l) as f64
    }

    /// Differentiable probabilities, shape `(1, m - l)`.
    pub fn probability_tensor(&self) -> Result<Tensor> {
        normalize_budget(&sigmoid(&(self.weights() * self.slope)?)?, self.target_ratio())
    }

    pub fn probabilities(&self) -> Result<Vec<f64>> {
        Ok(tensor_to_rows(&self.probability_tensor()?)?.remove(0))
    }

    /// One Bernoulli realization with straight-through gradients, as a full
    /// `(1, m)` row mask including the base band.
    pub fn realize(&self, rng: &mut impl Rng) -> Result<Tensor> {
        let p = self.probability_tensor()?;
        let h = p.dim(1)?;
        let u: Vec<f64> = (0..h).map(|_| rng.random::<f64>()).collect();
        let u = Tensor::from_vec(u, (1, h), p.device())?.to_dtype(p.dtype())?;
        // p >= u exactly when p - u + 1/2 >= 1/2
        let hf = ste_binarize(&((p - u)? + 0.5)?, 0.5)?;
        with_base_band(&hf, self.budget.m, self.budget.l)
    }

    /// Deterministic deployment mask: the `b` most probable rows.
    pub fn deployed_mask(&self) -> Result<BinaryMask> {
        let Budget { m, l, b } = self.budget;
        enforce_budget_high_freq(&self.probabilities()?, l, b, m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        self.store.load(path)
    }
}

/// LOUPE as a mask source: the top rows, or per-image draws from the learned
/// probabilities when `stochastic` holds a seed.
#[derive(Debug, Clone)]
pub struct LoupeSampler<'a> {
    pub model: &'a LoupeModel,
    pub stochastic: Option<u64>,
}

impl MaskSource for LoupeSampler<'_> {
    fn name(&self) -> String {
        match self.stochastic {
            None => "loupe".into(),
            Some(_) => "loupe-stochastic".into(),
        }
    }

    fn masks(&self, batch: &Batch) -> Result<Vec<BinaryMask>> {
        let Budget { m, l, b } = self.model.budget;
        match self.stochastic {
            None => Ok(vec![self.model.deployed_mask()?; batch.len()]),
            Some(seed) => {
                let mut density = vec![0.0; m];
                for (row, p) in high_freq_rows(m, l)?.into_iter().zip(self.model.probabilities()?) {
                    density[row] = p;
                }
                batch
                    .ids
                    .iter()
                    .map(|id| make_prob_mask(m, l, b, &density, &mut ChaCha8Rng::seed_from_u64(image_seed(seed, id))))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoupeSummary {
    pub train_loss: Vec<f64>,
    /// Mean realized high-frequency sampling ratio per epoch.
    pub sampling_ratio: Vec<f64>,
}

/// Optimizers of the row weights and of the reconstructor.
pub struct LoupeOptimizers {
    pub mask: RmsProp,
    pub recon: RmsProp,
}

impl LoupeOptimizers {
    pub fn new(model: &LoupeModel, recon: &dyn Reconstructor, cfg: &LoupeConfig) -> Result<Self> {
        let store = recon
            .params()
            .ok_or_else(|| Error::Config("LOUPE needs a trainable reconstructor".into()))?;
        Ok(Self {
            mask: RmsProp::for_store(model.store(), cfg.lr_mask)?,
            recon: RmsProp::for_store(store, cfg.lr_recon)?,
        })
    }
}

/// Joint training of the row weights and the reconstructor against the
/// unnormalized squared error, one mask realization per batch.
#[allow(clippy::too_many_arguments)]
pub fn train_loupe(
    model: &LoupeModel,
    recon: &dyn Reconstructor,
    opts: &mut LoupeOptimizers,
    train: &[Slice],
    cfg: &LoupeConfig,
    start_epoch: usize,
    dft: &CenteredDft,
    log: &mut EventLog,
    on_epoch: &mut dyn FnMut(usize, &LoupeOptimizers) -> Result<()>,
) -> Result<LoupeSummary> {
    if train.is_empty() {
        return Err(Error::validation("LOUPE training needs a non-empty dataset"));
    }
    let store = recon
        .params()
        .ok_or_else(|| Error::Config("LOUPE needs a trainable reconstructor".into()))?;
    let (dtype, device) = (store.dtype(), store.device().clone());
    let l = model.budget.l;
    let h = (model.budget.m - l) as f64;
    let mut summary = LoupeSummary::default();
    for epoch in start_epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6f_7570);
        rng.set_stream(epoch as u64 + 1);
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let (mut total, mut ratio) = (0.0, 0.0);
        for (i, idx) in batches.iter().enumerate() {
            let batch = make_batch(train, idx, dtype, &device)?;
            let mask = model.realize(&mut rng)?;
            ratio += (scalar(&mask.detach().sum_all()?)? - l as f64) / h;
            let x = recon.reconstruct(&batch.measure(&mask)?, &mask, dft)?;
            let loss = l2(&x, &batch.target)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::Training(format!("non-finite LOUPE loss at epoch {epoch}, batch {i}")));
            }
            total += v;
            let grads = loss.backward()?;
            opts.mask.step(&grads)?;
            opts.recon.step(&grads)?;
        }
        let n = batches.len() as f64;
        summary.train_loss.push(total / n);
        summary.sampling_ratio.push(ratio / n);
        log.push(TrainEvent::Epoch {
            stage: "loupe".into(),
            epoch,
            train_loss: total / n,
            val_loss: None,
            lr: cfg.lr_recon,
            sampling_ratio: Some(ratio / n),
        })?;
        on_epoch(epoch, opts)?;
    }
    Ok(summary)
}
