use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::conv::{max_pool, norm_relu};
use crate::error::Result;
use crate::params::ParamStore;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
}

impl Conv2d {
    /// `k x k` convolution, stride 1, bound `1/sqrt(fan_in)` initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[c_out, c_in, k, k], bound, rng)?;
        let bias = if bias {
            Some(store.uniform(format!("{name}.bias"), &[c_out], bound, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// 2x2 transposed convolution with stride 2 (doubles the spatial size).
#[derive(Debug, Clone)]
pub struct Upsample {
    weight: Tensor,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / ((c_out * 4) as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[c_in, c_out, 2, 2], bound, rng)?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[d_out, d_in], bound, rng)?,
            bias: store.uniform(format!("{name}.bias"), &[d_out], bound, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions, no affine terms.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Two 3x3 convolutions, each followed by instance normalization and ReLU.
/// `padding = 1` keeps the spatial size.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.0"), c_in, c_out, 3, 1, false, rng)?,
            b: Conv2d::new(store, &format!("{name}.1"), c_out, c_out, 3, 1, false, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = norm_relu(&self.a.forward(x)?)?;
        norm_relu(&self.b.forward(&x)?)
    }
}

/// 2x2 max pooling with stride 2 on even-sized inputs.
pub fn max_pool_2(x: &Tensor) -> Result<Tensor> {
    max_pool(x, 2, 2)
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let r = i.rem_euclid(period);
    if r < len as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Reflect-pads the last two dims of a `(b, c, h, w)` tensor to multiples of
/// `multiple`, split evenly around the image. Returns the padded tensor and
/// the `(top, left)` offsets for cropping back.
pub fn reflect_pad_to(x: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    let (_, _, h, w) = x.dims4()?;
    let (ht, wt) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ht, wt) == (h, w) {
        return Ok((x.clone(), (0, 0)));
    }
    let (top, left) = ((ht - h) / 2, (wt - w) / 2);
    let rows: Vec<u32> = (0..ht).map(|i| reflect_index(i as isize - top as isize, h) as u32).collect();
    let cols: Vec<u32> = (0..wt).map(|j| reflect_index(j as isize - left as isize, w) as u32).collect();
    let rows = Tensor::new(rows.as_slice(), x.device())?;
    let cols = Tensor::new(cols.as_slice(), x.device())?;
    let out = x.index_select(&rows, 2)?.index_select(&cols, 3)?;
    Ok((out, (top, left)))
}

pub fn crop(x: &Tensor, offset: (usize, usize), h: usize, w: usize) -> Result<Tensor> {
    Ok(x.narrow(2, offset.0, h)?.narrow(3, offset.1, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn max_pool_gradient_routes_to_the_maximum() {
        let data: Vec<f64> = (0..16).map(|i| ((i * 41) % 101) as f64).collect();
        let x = candle_core::Var::from_tensor(&Tensor::from_vec(data.clone(), (1, 1, 4, 4), &Device::Cpu).unwrap()).unwrap();
        let y = max_pool_2(x.as_tensor()).unwrap();
        let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        for (k, (i, j)) in [(0, 0), (0, 2), (2, 0), (2, 2)].into_iter().enumerate() {
            let best = [data[i * 4 + j], data[i * 4 + j + 1], data[(i + 1) * 4 + j], data[(i + 1) * 4 + j + 1]]
                .into_iter()
                .fold(f64::MIN, f64::max);
            assert_eq!(got[k], best);
        }
        let g: Vec<f64> = y.sum_all().unwrap().backward().unwrap().get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g.iter().sum::<f64>(), 4.0);
        assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn reflect_indices_follow_mirror_rule() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let x = Tensor::arange(0f32, 2.0 * 5.0 * 7.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 5, 7))
            .unwrap();
        let (p, off) = reflect_pad_to(&x, 4).unwrap();
        assert_eq!(p.dims(), &[1, 2, 8, 8]);
        let back = crop(&p, off, 5, 7).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((2, 1, 4, 4)).unwrap();
        let y = instance_norm(&(x.sqr().unwrap())).unwrap();
        for b in 0..2 {
            let v: Vec<f64> = y.get(b).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let mean = v.iter().sum::<f64>() / 16.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert_eq!(y.dtype(), DType::F64);
    }
}
