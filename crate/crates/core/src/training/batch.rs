use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::data::Slice;
use crate::forward_model::{fft2c, ComplexImage};
use crate::masks::BinaryMask;
use crate::ops::{arrays_to_tensor, rows_to_tensor, CTensor};

/// Fully sampled k-space and magnitude ground truth for a set of images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(b, m, n)` centered k-space.
    pub kspace: CTensor,
    /// `(b, m, n)` magnitude of the ground-truth images.
    pub target: Tensor,
}

impl Batch {
    pub fn from_images(ids: Vec<String>, images: &[&ComplexImage], dtype: DType, device: &Device) -> Result<Self> {
        if ids.len() != images.len() || images.is_empty() {
            return Err(Error::validation("a batch needs one id per image and at least one image"));
        }
        let spectra: Vec<Array2<_>> = images.iter().map(|x| fft2c(x).into_inner()).collect();
        let mags: Vec<Array2<f64>> = images.iter().map(|x| x.magnitude()).collect();
        Ok(Self {
            ids,
            kspace: CTensor::from_arrays(&spectra.iter().collect::<Vec<_>>(), dtype, device)?,
            target: arrays_to_tensor(&mags.iter().collect::<Vec<_>>(), dtype, device)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(m, n)` grid size.
    pub fn grid(&self) -> (usize, usize) {
        let d = self.kspace.dims();
        (d[1], d[2])
    }

    /// Row-masked k-space for masks of shape `(b, m)` or `(1, m)`.
    pub fn measure(&self, mask: &Tensor) -> Result<CTensor> {
        self.kspace.mask_rows(mask)
    }
}

/// Stacks binary masks into a `(b, m)` tensor.
pub fn masks_to_tensor(masks: &[BinaryMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = masks.iter().map(|m| m.as_f64()).collect();
    rows_to_tensor(&rows, dtype, device)
}

/// Shuffled index batches for one epoch; the order depends only on
/// `(seed, epoch)`. The last batch may be smaller.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Batch of the slices at `idx`.
pub fn make_batch(slices: &[Slice], idx: &[usize], dtype: DType, device: &Device) -> Result<Batch> {
    let picked: Vec<&Slice> = idx.iter().map(|&i| &slices[i]).collect();
    Batch::from_images(
        picked.iter().map(|s| s.id()).collect(),
        &picked.iter().map(|s| &s.image).collect::<Vec<_>>(),
        dtype,
        device,
    )
}
