use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::norm_relu;
use super::layers::{crop, max_pool_2, reflect_pad_to, Conv2d, DoubleConv, Upsample};
use super::Reconstructor;
use crate::error::{Error, Result};
use crate::ops::{CTensor, CenteredDft};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels of the first block; doubled at every pooling stage.
    pub channels: usize,
    /// Number of pooling stages.
    pub depth: usize,
    /// Adds the input (magnitude when reducing 2 channels to 1) to the output.
    pub residual: bool,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            channels: 64,
            depth: 4,
            residual: true,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 2) || !matches!(self.out_channels, 1 | 2) {
            return Err(Error::Config("U-Net takes 1 or 2 input and output channels".into()));
        }
        if self.channels == 0 || self.depth == 0 {
            return Err(Error::Config("U-Net needs positive channels and depth".into()));
        }
        if self.residual && self.in_channels < self.out_channels {
            return Err(Error::Config("residual U-Net cannot expand channels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UnetModel {
    cfg: UnetConfig,
    store: ParamStore,
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<(Upsample, DoubleConv)>,
    head: Conv2d,
}

impl UnetModel {
    pub fn new(cfg: UnetConfig, mut store: ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if !store.is_empty() {
            return Err(Error::validation("U-Net needs an empty parameter store"));
        }
        let c = cfg.channels;
        let mut down = Vec::with_capacity(cfg.depth);
        let mut ch = c;
        down.push(DoubleConv::new(&mut store, "down0", cfg.in_channels, c, rng)?);
        for i in 1..cfg.depth {
            down.push(DoubleConv::new(&mut store, &format!("down{i}"), ch, ch * 2, rng)?);
            ch *= 2;
        }
        let bottleneck = DoubleConv::new(&mut store, "bottleneck", ch, ch * 2, rng)?;
        let mut up = Vec::with_capacity(cfg.depth);
        for i in (0..cfg.depth).rev() {
            let out = c << i;
            up.push((
                Upsample::new(&mut store, &format!("up{i}.t"), out * 2, out, rng)?,
                DoubleConv::new(&mut store, &format!("up{i}.conv"), out * 2, out, rng)?,
            ));
        }
        let head = Conv2d::new(&mut store, "head", c, cfg.out_channels, 1, 0, true, rng)?;
        Ok(Self {
            cfg,
            store,
            down,
            bottleneck,
            up,
            head,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Sets the final 1x1 layer to zero; a residual model then returns its input.
    pub fn zero_head(&self) -> Result<()> {
        for (name, var) in self.store.iter() {
            if name.starts_with("head.") {
                var.set(&var.as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// `(b, in_channels, h, w)` to `(b, out_channels, h, w)`. Sizes that are not
    /// multiples of `2^depth` are reflect-padded and cropped back.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!("{} channels", self.cfg.in_channels), format!("{c} channels")));
        }
        let (padded, offset) = reflect_pad_to(x, 1 << self.cfg.depth)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut out = padded;
        for block in &self.down {
            out = block.forward(&out)?;
            skips.push(out.clone());
            out = max_pool_2(&out)?;
        }
        out = self.bottleneck.forward(&out)?;
        for (up, conv) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            out = norm_relu(&up.forward(&out)?)?;
            out = conv.forward(&Tensor::cat(&[&out, &skip], 1)?)?;
        }
        let out = crop(&self.head.forward(&out)?, offset, h, w)?;
        if !self.cfg.residual {
            return Ok(out);
        }
        let base = if c == self.cfg.out_channels {
            x.clone()
        } else {
            // 2 -> 1: magnitude of the complex input
            crate::ops::safe_sqrt(&x.sqr()?.sum_keepdim(1)?)?
        };
        Ok((out + base)?)
    }
}

impl Reconstructor for UnetModel {
    fn reconstruct(&self, y: &CTensor, _mask: &Tensor, dft: &CenteredDft) -> Result<Tensor> {
        if self.cfg.out_channels != 1 {
            return Err(Error::Config("image reconstructor needs one output channel".into()));
        }
        let zf = dft.inverse(y)?;
        let input = match self.cfg.in_channels {
            1 => zf.abs()?.unsqueeze(1)?,
            _ => zf.to_channels()?,
        };
        Ok(self.forward(&input)?.squeeze(1)?)
    }

    fn params(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }

    fn kind(&self) -> &'static str {
        "unet"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};

    fn model(cfg: UnetConfig, dtype: DType, seed: u64) -> UnetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UnetModel::new(cfg, ParamStore::new(dtype, Device::Cpu), &mut rng).unwrap()
    }

    fn small(in_channels: usize, residual: bool) -> UnetConfig {
        UnetConfig {
            in_channels,
            out_channels: 1,
            channels: 4,
            depth: 4,
            residual,
        }
    }

    #[test]
    fn preserves_spatial_shape() {
        let net = model(small(1, false), DType::F32, 0);
        let x = Tensor::randn(0f32, 1.0, (2, 1, 64, 64), &Device::Cpu).unwrap();
        assert_eq!(net.forward(&x).unwrap().dims(), &[2, 1, 64, 64]);
        let x = Tensor::randn(0f32, 1.0, (1, 1, 20, 36), &Device::Cpu).unwrap();
        assert_eq!(net.forward(&x).unwrap().dims(), &[1, 1, 20, 36]);
    }

    #[test]
    fn residual_with_zero_head_returns_input() {
        let net = model(small(1, true), DType::F32, 1);
        net.zero_head().unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 1, 32, 32), &Device::Cpu).unwrap();
        let y = net.forward(&x).unwrap();
        let d = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);

        let net = model(small(2, true), DType::F64, 2);
        net.zero_head().unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 2, 16, 16), &Device::Cpu).unwrap();
        let y = net.forward(&x).unwrap();
        let mag = x.sqr().unwrap().sum_keepdim(1).unwrap().sqrt().unwrap();
        let d = (y - mag).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-9);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = model(small(1, false), DType::F64, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Var::from_tensor(&Tensor::from_vec(data.clone(), (1, 1, 8, 8), &Device::Cpu).unwrap()).unwrap();
        let out = net.forward(x.as_tensor()).unwrap().sum_all().unwrap();
        let grad: Vec<f64> = out.backward().unwrap().get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let eval = |d: &[f64]| {
            let t = Tensor::from_vec(d.to_vec(), (1, 1, 8, 8), &Device::Cpu).unwrap();
            net.forward(&t).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let h = 1e-6;
        for idx in [0usize, 9, 27, 36, 63] {
            let (mut p, mut m) = (data.clone(), data.clone());
            p[idx] += h;
            m[idx] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-8);
            assert!(rel < 1e-3, "idx {idx}: fd {fd} vs autodiff {}", grad[idx]);
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let net = model(small(2, false), DType::F32, 5);
        let x = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape { .. })));
    }
}
