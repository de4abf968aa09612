//! Mask sources used for training and evaluation.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::masks::{enforce_budget_high_freq, make_prob_mask, make_random_mask, BinaryMask};
use crate::networks::MnetModel;
use crate::ops::{sigmoid, tensor_to_rows};

use super::batch::Batch;

/// Produces one budget-exact mask per image of a batch.
pub trait MaskSource {
    fn name(&self) -> String;
    fn masks(&self, batch: &Batch) -> Result<Vec<BinaryMask>>;
}

/// Seed derived from a run seed and an image id, so a random sampler gives
/// each image the same mask however the images are batched.
pub fn image_seed(seed: u64, id: &str) -> u64 {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    id.hash(&mut h);
    h.finish()
}

/// The same mask for every image.
#[derive(Debug, Clone)]
pub struct FixedSampler {
    pub label: String,
    pub mask: BinaryMask,
}

impl MaskSource for FixedSampler {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn masks(&self, batch: &Batch) -> Result<Vec<BinaryMask>> {
        Ok(vec![self.mask.clone(); batch.len()])
    }
}

/// Uniformly random high-frequency rows, seeded per image.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    pub m: usize,
    pub l: usize,
    pub b: usize,
    pub seed: u64,
}

impl MaskSource for UniformSampler {
    fn name(&self) -> String {
        "random".into()
    }

    fn masks(&self, batch: &Batch) -> Result<Vec<BinaryMask>> {
        batch
            .ids
            .iter()
            .map(|id| make_random_mask(self.m, self.l, self.b, &mut ChaCha8Rng::seed_from_u64(image_seed(self.seed, id))))
            .collect()
    }
}

/// Rows drawn with probability proportional to a density, seeded per image.
#[derive(Debug, Clone)]
pub struct DensitySampler {
    pub m: usize,
    pub l: usize,
    pub b: usize,
    pub density: Vec<f64>,
    pub seed: u64,
    pub label: String,
}

impl MaskSource for DensitySampler {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn masks(&self, batch: &Batch) -> Result<Vec<BinaryMask>> {
        batch
            .ids
            .iter()
            .map(|id| {
                let mut rng = ChaCha8Rng::seed_from_u64(image_seed(self.seed, id));
                make_prob_mask(self.m, self.l, self.b, &self.density, &mut rng)
            })
            .collect()
    }
}

/// Object-adaptive masks from the mask predictor.
#[derive(Debug, Clone, Copy)]
pub struct MnetSampler<'a> {
    pub model: &'a MnetModel,
    pub b: usize,
}

impl MnetSampler<'_> {
    /// Predicted soft masks on the high-frequency rows, one row per image.
    pub fn soft(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let logits = self.model.logits(&self.model.observe(&batch.kspace)?)?.detach();
        tensor_to_rows(&sigmoid(&logits)?)
    }
}

impl MaskSource for MnetSampler<'_> {
    fn name(&self) -> String {
        "mnet".into()
    }

    fn masks(&self, batch: &Batch) -> Result<Vec<BinaryMask>> {
        let cfg = self.model.config();
        self.soft(batch)?
            .iter()
            .map(|row| enforce_budget_high_freq(row, cfg.l, self.b, cfg.m))
            .collect()
    }
}
