use crate::data::Slice;
use crate::error::{Error, Result};
use crate::metrics::{ImageRecord, MetricsReport};
use crate::networks::Reconstructor;
use crate::ops::{tensor_to_arrays, CenteredDft};

use super::batch::{make_batch, masks_to_tensor};
use super::sampling::MaskSource;

/// Per-image metrics of `recon` on `slices` masked by `sampler`, in slice order.
pub fn evaluate(
    sampler: &dyn MaskSource,
    recon: &dyn Reconstructor,
    label: &str,
    slices: &[Slice],
    batch_size: usize,
    dft: &CenteredDft,
) -> Result<MetricsReport> {
    if slices.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    let (dtype, device) = match recon.params() {
        Some(p) => (p.dtype(), p.device().clone()),
        None => (candle_core::DType::F64, candle_core::Device::Cpu),
    };
    let idx: Vec<usize> = (0..slices.len()).collect();
    let mut records = Vec::with_capacity(slices.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch(slices, chunk, dtype, &device)?;
        let mask = masks_to_tensor(&sampler.masks(&batch)?, dtype, &device)?;
        let x = recon.reconstruct(&batch.measure(&mask)?, &mask, dft)?.detach();
        let (xs, gts) = (tensor_to_arrays(&x)?, tensor_to_arrays(&batch.target)?);
        for ((id, x), gt) in batch.ids.iter().zip(&xs).zip(&gts) {
            records.push(ImageRecord::compute(id.clone(), x, gt)?);
        }
    }
    Ok(MetricsReport::new(sampler.name(), label, records))
}
