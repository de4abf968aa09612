//! Brute-force and greedy mask search on tiny instances.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_model::ComplexImage;
use crate::masks::{high_freq_rows, BinaryMask};
use crate::networks::Reconstructor;
use crate::ops::CenteredDft;
use crate::training::losses::nrmse_per_image;
use crate::training::{masks_to_tensor, Batch};

/// Largest number of masks the exhaustive search will enumerate.
pub const MAX_CANDIDATES: u128 = 100_000;

const CHUNK: usize = 256;

/// `C(n, k)`, saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

/// One image with its fully sampled k-space, ready for repeated scoring.
pub struct Instance<'a> {
    pub id: String,
    batch: Batch,
    recon: &'a dyn Reconstructor,
    dft: &'a CenteredDft,
}

impl<'a> Instance<'a> {
    pub fn new(id: impl Into<String>, image: &ComplexImage, recon: &'a dyn Reconstructor, dft: &'a CenteredDft) -> Result<Self> {
        let id = id.into();
        let (dtype, device) = match recon.params() {
            Some(p) => (p.dtype(), p.device().clone()),
            None => (candle_core::DType::F64, candle_core::Device::Cpu),
        };
        Ok(Self {
            batch: Batch::from_images(vec![id.clone()], &[image], dtype, &device)?,
            id,
            recon,
            dft,
        })
    }

    /// Quality `-NRMSE` of the reconstruction under each mask.
    pub fn qualities(&self, masks: &[BinaryMask]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(masks.len());
        for chunk in masks.chunks(CHUNK) {
            let mask = masks_to_tensor(chunk, self.batch.target.dtype(), self.batch.target.device())?;
            let x = self.recon.reconstruct(&self.batch.measure(&mask)?, &mask, self.dft)?.detach();
            let gt = self.batch.target.broadcast_as(x.shape())?;
            let e: Vec<f64> = nrmse_per_image(&x, &gt)?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
            out.extend(e.into_iter().map(|v| -v));
        }
        Ok(out)
    }

    pub fn quality(&self, mask: &BinaryMask) -> Result<f64> {
        Ok(self.qualities(std::slice::from_ref(mask))?[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMask {
    pub mask: BinaryMask,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub m: usize,
    pub l: usize,
    pub b: usize,
    pub image_id: String,
    pub reconstructor: String,
    /// Every feasible mask, best first.
    pub ranked: Vec<RankedMask>,
}

impl OracleResult {
    pub fn best(&self) -> &RankedMask {
        &self.ranked[0]
    }

    /// Quality at the middle of the ranking (mean of the two middle entries
    /// for an even count).
    pub fn median_quality(&self) -> f64 {
        let n = self.ranked.len();
        let mut q: Vec<f64> = self.ranked.iter().map(|r| r.quality).collect();
        q.reverse();
        if n % 2 == 1 {
            q[n / 2]
        } else {
            0.5 * (q[n / 2 - 1] + q[n / 2])
        }
    }

    /// Number of masks strictly better than `quality`.
    pub fn rank_of(&self, quality: f64) -> usize {
        self.ranked.iter().take_while(|r| r.quality > quality).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Scores every mask with exactly `b` high-frequency rows. Ties keep
/// enumeration order, which is lexicographic in the row indices.
pub fn exhaustive_search(inst: &Instance<'_>, m: usize, l: usize, b: usize) -> Result<OracleResult> {
    let rows = high_freq_rows(m, l)?;
    let count = binomial(rows.len(), b);
    if b > rows.len() {
        return Err(Error::validation(format!("budget {b} exceeds {} high-frequency rows", rows.len())));
    }
    if count > MAX_CANDIDATES {
        return Err(Error::Combinatorial {
            count,
            limit: MAX_CANDIDATES,
        });
    }
    let masks = (0..rows.len())
        .combinations(b)
        .map(|pick| {
            let mut hf = vec![0u8; rows.len()];
            for i in pick {
                hf[i] = 1;
            }
            BinaryMask::from_high_freq(m, l, &hf)
        })
        .collect::<Result<Vec<_>>>()?;
    let q = inst.qualities(&masks)?;
    let mut ranked: Vec<RankedMask> = masks.into_iter().zip(q).map(|(mask, quality)| RankedMask { mask, quality }).collect();
    ranked.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    Ok(OracleResult {
        m,
        l,
        b,
        image_id: inst.id.clone(),
        reconstructor: inst.recon.kind().into(),
        ranked,
    })
}

/// Masks after each greedy addition of the row that most improves quality
/// (lowest row on ties), with their qualities; the first entry is the base band.
pub fn greedy_path(inst: &Instance<'_>, m: usize, l: usize, b: usize) -> Result<Vec<RankedMask>> {
    let h = high_freq_rows(m, l)?.len();
    if b > h {
        return Err(Error::validation(format!("budget {b} exceeds {h} high-frequency rows")));
    }
    let mut hf = vec![0u8; h];
    let base = BinaryMask::from_high_freq(m, l, &hf)?;
    let mut path = vec![RankedMask {
        quality: inst.quality(&base)?,
        mask: base,
    }];
    for _ in 0..b {
        let free: Vec<usize> = (0..h).filter(|&i| hf[i] == 0).collect();
        let candidates = free
            .iter()
            .map(|&i| {
                let mut next = hf.clone();
                next[i] = 1;
                BinaryMask::from_high_freq(m, l, &next)
            })
            .collect::<Result<Vec<_>>>()?;
        let q = inst.qualities(&candidates)?;
        let mut best = 0;
        for (k, v) in q.iter().enumerate() {
            if *v > q[best] {
                best = k;
            }
        }
        hf[free[best]] = 1;
        path.push(RankedMask {
            mask: candidates[best].clone(),
            quality: q[best],
        });
    }
    Ok(path)
}

pub fn greedy_search(inst: &Instance<'_>, m: usize, l: usize, b: usize) -> Result<BinaryMask> {
    Ok(greedy_path(inst, m, l, b)?.pop().expect("path holds the base band").mask)
}
