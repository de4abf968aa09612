use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::max_pool;
use super::layers::{DoubleConv, Linear};
use crate::error::{Error, Result};
use crate::forward_model::KSpace;
use crate::masks::{base_band, SoftMask};
use crate::ops::{self, CTensor};
use crate::params::ParamStore;

const POOL_KERNEL: usize = 3;
const POOL_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnetConfig {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    /// Output channels of the double-conv block and the four downsampling blocks.
    pub channels: Vec<usize>,
    /// Hidden widths of the fully-connected stack; the last layer has width `m - l`.
    pub fc: Vec<usize>,
}

impl MnetConfig {
    pub fn new(m: usize, n: usize, l: usize) -> Self {
        Self {
            m,
            n,
            l,
            channels: vec![64, 128, 256, 512, 512],
            fc: vec![1024, 512, 512],
        }
    }

    pub fn out_len(&self) -> usize {
        self.m - self.l
    }

    fn pooled(size: usize) -> Option<usize> {
        (size >= POOL_KERNEL).then(|| (size - POOL_KERNEL) / POOL_STRIDE + 1)
    }

    /// Spatial size entering the average pool.
    fn final_size(&self) -> Option<(usize, usize)> {
        let (mut h, mut w) = (self.m, self.n);
        for _ in 1..self.channels.len() {
            h = Self::pooled(h)?;
            w = Self::pooled(w)?;
        }
        Some((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.l >= self.m {
            return Err(Error::Config(format!("base rows {} must lie in (0, {})", self.l, self.m)));
        }
        if self.channels.len() < 2 || self.channels.contains(&0) || self.fc.contains(&0) {
            return Err(Error::Config("MNet needs a conv block plus downsampling blocks with positive widths".into()));
        }
        match self.final_size() {
            Some((h, w)) if h >= 2 && w >= 2 => Ok(()),
            _ => Err(Error::Config(format!("{}x{} is too small for {} pooling stages", self.m, self.n, self.channels.len() - 1))),
        }
    }

    fn flat_len(&self) -> usize {
        let (h, w) = self.final_size().expect("validated");
        self.channels.last().expect("validated") * (h / 2) * (w / 2)
    }
}

/// Max pooling with a 3x3 window and stride 2.
fn max_pool_3s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if MnetConfig::pooled(h).is_none() || MnetConfig::pooled(w).is_none() {
        return Err(Error::validation("pooling input too small"));
    }
    max_pool(x, POOL_KERNEL, POOL_STRIDE)
}

/// 2x2 average pooling; a trailing odd row or column is dropped.
fn avg_pool_2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = x.narrow(2, 0, h / 2 * 2)?.narrow(3, 0, w / 2 * 2)?;
    Ok(x.avg_pool2d(2)?)
}

/// Mask predictor: low-frequency k-space in, one logit per high-frequency row out.
#[derive(Debug, Clone)]
pub struct MnetModel {
    cfg: MnetConfig,
    store: ParamStore,
    first: DoubleConv,
    down: Vec<DoubleConv>,
    fc: Vec<Linear>,
}

impl MnetModel {
    pub fn new(cfg: MnetConfig, mut store: ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if !store.is_empty() {
            return Err(Error::validation("MNet needs an empty parameter store"));
        }
        let first = DoubleConv::new(&mut store, "inc", 2, cfg.channels[0], rng)?;
        let down = cfg
            .channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| DoubleConv::new(&mut store, &format!("down{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        let mut widths = vec![cfg.flat_len()];
        widths.extend(&cfg.fc);
        widths.push(cfg.out_len());
        let fc = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("fc{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            store,
            first,
            down,
            fc,
        })
    }

    pub fn config(&self) -> &MnetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(b, 2, m, n)` observed k-space to `(b, m - l)` logits.
    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, m, n) = z.dims4()?;
        if (c, m, n) != (2, self.cfg.m, self.cfg.n) {
            return Err(Error::shape(format!("2x{}x{}", self.cfg.m, self.cfg.n), format!("{c}x{m}x{n}")));
        }
        let mut x = self.first.forward(z)?;
        for block in &self.down {
            x = block.forward(&max_pool_3s2(&x)?)?;
        }
        let mut x = avg_pool_2(&x)?.reshape((b, ()))?;
        let last = self.fc.len() - 1;
        for (i, layer) in self.fc.iter().enumerate() {
            x = layer.forward(&x)?;
            if i < last {
                x = x.relu()?;
            }
        }
        Ok(x)
    }

    /// Soft prediction `sigmoid(logits)`, shape `(b, m - l)`.
    pub fn predict_soft(&self, z: &Tensor) -> Result<Tensor> {
        ops::sigmoid(&self.logits(z)?)
    }

    /// Keeps only the base rows of `k` (shape `(b, m, n)` pair) and stacks
    /// real and imaginary parts as channels.
    pub fn observe(&self, k: &CTensor) -> Result<Tensor> {
        let (_, m, _) = k.re.dims3()?;
        if m != self.cfg.m {
            return Err(Error::shape(self.cfg.m, m));
        }
        let base = base_band(self.cfg.m, self.cfg.l)?;
        let mut rows = vec![0.0; m];
        for r in base {
            rows[r] = 1.0;
        }
        let mask = Tensor::from_vec(rows, (1, m), k.re.device())?.to_dtype(k.re.dtype())?;
        k.mask_rows(&mask)?.to_channels()
    }

    /// Single-image prediction from full k-space.
    pub fn predict(&self, k: &KSpace) -> Result<SoftMask> {
        let kt = CTensor::from_arrays(&[k.data()], self.store.dtype(), self.store.device())?;
        let soft = self.predict_soft(&self.observe(&kt)?)?;
        let rows = ops::tensor_to_rows(&soft)?;
        SoftMask::new(rows.into_iter().next().expect("one image"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use ndarray::Array2;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};

    fn tiny(m: usize, n: usize, l: usize) -> MnetConfig {
        MnetConfig {
            m,
            n,
            l,
            channels: vec![2, 3, 4, 4, 4],
            fc: vec![8, 6, 6],
        }
    }

    fn model(cfg: MnetConfig, dtype: DType, seed: u64) -> MnetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MnetModel::new(cfg, ParamStore::new(dtype, Device::Cpu), &mut rng).unwrap()
    }

    fn random_kspace(seed: u64, m: usize, n: usize) -> KSpace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KSpace::new(Array2::from_shape_fn((m, n), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        }))
        .unwrap()
    }

    #[test]
    fn output_length_is_unobserved_row_count() {
        assert_eq!(MnetConfig::new(320, 320, 8).out_len(), 312);
        let net = model(tiny(64, 64, 8), DType::F32, 0);
        let soft = net.predict(&random_kspace(1, 64, 64)).unwrap();
        assert_eq!(soft.values.len(), 56);
        assert!(soft.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn full_scale_geometry_is_valid() {
        let cfg = MnetConfig::new(320, 320, 8);
        cfg.validate().unwrap();
        assert_eq!(cfg.final_size(), Some((19, 19)));
        assert!(MnetConfig::new(16, 16, 4).validate().is_err());
    }

    #[test]
    fn prediction_is_deterministic() {
        let net = model(tiny(64, 64, 4), DType::F32, 2);
        let k = random_kspace(3, 64, 64);
        assert_eq!(net.predict(&k).unwrap(), net.predict(&k).unwrap());
    }

    #[test]
    fn only_base_rows_are_observed() {
        let net = model(tiny(64, 64, 4), DType::F64, 4);
        let k = random_kspace(5, 64, 64);
        let mut k2 = k.data().clone();
        // perturb a row outside the base band
        k2.row_mut(0).mapv_inplace(|v| v * 3.0);
        assert_eq!(net.predict(&k).unwrap(), net.predict(&KSpace::new(k2).unwrap()).unwrap());
        let mut k3 = k.data().clone();
        let base = base_band(64, 4).unwrap().start;
        k3.row_mut(base).mapv_inplace(|v| v * 1.1);
        let (a, b) = (net.predict(&k).unwrap(), net.predict(&KSpace::new(k3).unwrap()).unwrap());
        assert!(a.values.iter().zip(&b.values).any(|(x, y)| x != y));
    }

    #[test]
    fn rejects_wrong_grid() {
        let net = model(tiny(64, 64, 4), DType::F32, 6);
        assert!(net.predict(&random_kspace(7, 64, 60)).is_err());
    }

    #[test]
    fn strided_max_pool_matches_direct_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..2 * 9 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Var::from_tensor(&Tensor::from_vec(data.clone(), (1, 2, 9, 7), &Device::Cpu).unwrap()).unwrap();
        let y = max_pool_3s2(x.as_tensor()).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 3]);
        let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let mut k = 0;
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..3 {
                        for dj in 0..3 {
                            best = best.max(data[c * 63 + (2 * i + di) * 7 + 2 * j + dj]);
                        }
                    }
                    assert_eq!(got[k], best);
                    k += 1;
                }
            }
        }
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx: Vec<f64> = g.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // each output routes a unit gradient to its argmax (values are distinct)
        assert!((gx.iter().sum::<f64>() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = model(tiny(64, 64, 4), DType::F64, 9);
        let k = random_kspace(10, 64, 64);
        let kt = CTensor::from_arrays(&[k.data()], DType::F64, &Device::Cpu).unwrap();
        let z = net.observe(&kt).unwrap();
        let w = Tensor::new(&[0.3f64, -1.0, 0.7, 2.0, -0.4, 1.1, 0.2, -0.9], &Device::Cpu).unwrap();
        let w = w.repeat(8).unwrap().narrow(0, 0, 60).unwrap();
        let loss = |net: &MnetModel| net.predict_soft(&z).unwrap().squeeze(0).unwrap().mul(&w).unwrap().sum_all().unwrap();
        let grads = loss(&net).backward().unwrap();
        let h = 1e-6;
        for name in ["inc.0.weight", "down2.1.weight", "fc1.bias", "fc3.weight"] {
            let var = net.store().get(name).unwrap();
            let g: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let idx = base.len() / 2;
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                let out = loss(&net).to_scalar::<f64>().unwrap();
                var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
                out
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel < 1e-3, "{name}: fd {fd} vs autodiff {}", g[idx]);
        }
    }
}
