//! Differentiable building blocks on candle tensors.
//!
//! Complex data is carried as a pair of real tensors. Batched images have
//! shape `(batch, m, n)`; batched row masks have shape `(batch, m)`.

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex tensor as separate real and imaginary parts of equal shape.
#[derive(Debug, Clone)]
pub struct CTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl CTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.dims() != im.dims() {
            return Err(Error::shape(format!("{:?}", re.dims()), format!("{:?}", im.dims())));
        }
        Ok(Self { re, im })
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self {
            re: self.re.zeros_like()?,
            im: self.im.zeros_like()?,
        })
    }

    pub fn dims(&self) -> &[usize] {
        self.re.dims()
    }

    pub fn add(&self, o: &CTensor) -> Result<CTensor> {
        Ok(Self {
            re: (&self.re + &o.re)?,
            im: (&self.im + &o.im)?,
        })
    }

    pub fn sub(&self, o: &CTensor) -> Result<CTensor> {
        Ok(Self {
            re: (&self.re - &o.re)?,
            im: (&self.im - &o.im)?,
        })
    }

    /// Multiplies by a real tensor that broadcasts against both parts.
    pub fn scale(&self, s: &Tensor) -> Result<CTensor> {
        Ok(Self {
            re: self.re.broadcast_mul(s)?,
            im: self.im.broadcast_mul(s)?,
        })
    }

    /// Scales row `i` of image `b` by `mask[b, i]`; `mask` has shape `(batch, m)`.
    pub fn mask_rows(&self, mask: &Tensor) -> Result<CTensor> {
        self.scale(&mask.unsqueeze(D::Minus1)?)
    }

    /// Per-image real inner product `Re <self, o>`, shape `(batch, 1, 1)`.
    pub fn real_dot(&self, o: &CTensor) -> Result<Tensor> {
        let s = ((&self.re * &o.re)? + (&self.im * &o.im)?)?;
        Ok(s.sum_keepdim(D::Minus1)?.sum_keepdim(D::Minus2)?)
    }

    /// Exact `sqrt(re^2 + im^2)`, see [`safe_sqrt`].
    pub fn abs(&self) -> Result<Tensor> {
        safe_sqrt(&(self.re.sqr()? + self.im.sqr()?)?)
    }

    /// Stacks real and imaginary parts as two channels: `(batch, 2, m, n)`.
    pub fn to_channels(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&[&self.re, &self.im], 1)?)
    }

    pub fn from_channels(t: &Tensor) -> Result<Self> {
        Ok(Self {
            re: t.narrow(1, 0, 1)?.squeeze(1)?,
            im: t.narrow(1, 1, 1)?.squeeze(1)?,
        })
    }

    pub fn detach(&self) -> CTensor {
        Self {
            re: self.re.detach(),
            im: self.im.detach(),
        }
    }

    pub fn from_arrays(images: &[&Array2<Complex64>], dtype: DType, device: &Device) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::validation("empty image batch"))?;
        let (m, n) = first.dim();
        let mut re = Vec::with_capacity(images.len() * m * n);
        let mut im = Vec::with_capacity(images.len() * m * n);
        for img in images {
            if img.dim() != (m, n) {
                return Err(Error::shape(format!("{m}x{n}"), format!("{:?}", img.dim())));
            }
            for v in img.iter() {
                re.push(v.re);
                im.push(v.im);
            }
        }
        let shape = (images.len(), m, n);
        Ok(Self {
            re: Tensor::from_vec(re, shape, device)?.to_dtype(dtype)?,
            im: Tensor::from_vec(im, shape, device)?.to_dtype(dtype)?,
        })
    }

    pub fn to_arrays(&self) -> Result<Vec<Array2<Complex64>>> {
        let re = tensor_to_arrays(&self.re)?;
        let im = tensor_to_arrays(&self.im)?;
        Ok(re
            .into_iter()
            .zip(im)
            .map(|(r, i)| ndarray::Zip::from(&r).and(&i).map_collect(|&a, &b| Complex64::new(a, b)))
            .collect())
    }
}

/// `(batch, m, n)` real tensor to a vector of arrays.
pub fn tensor_to_arrays(t: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, m, n) = t.dims3()?;
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((m, n), flat[i * m * n..(i + 1) * m * n].to_vec()).expect("sized"))
        .collect())
}

pub fn arrays_to_tensor(images: &[&Array2<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::validation("empty image batch"))?;
    let (m, n) = first.dim();
    let mut data = Vec::with_capacity(images.len() * m * n);
    for img in images {
        if img.dim() != (m, n) {
            return Err(Error::shape(format!("{m}x{n}"), format!("{:?}", img.dim())));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), m, n), device)?.to_dtype(dtype)?)
}

/// Row masks `(batch, m)` from 0/1 or real rows.
pub fn rows_to_tensor(rows: &[Vec<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let m = rows.first().map(Vec::len).ok_or_else(|| Error::validation("empty mask batch"))?;
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::validation("mask rows of unequal length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), m), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

/// Centered orthonormal 2-D DFT as dense matrix products.
///
/// The 1-D centered transform matrix `C[k, p] = exp(-2 pi i (k - c)(p - c) / N) / sqrt(N)`
/// with `c = N / 2` is symmetric, so `fft2c(X) = C_m X C_n` and
/// `ifft2c(K) = conj(C_m) K conj(C_n)`.
#[derive(Debug, Clone)]
pub struct CenteredDft {
    m: usize,
    n: usize,
    rows: (Tensor, Tensor),
    cols: (Tensor, Tensor),
}

fn dft_matrix(len: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let c = (len / 2) as f64;
    let norm = 1.0 / (len as f64).sqrt();
    let mut re = Vec::with_capacity(len * len);
    let mut im = Vec::with_capacity(len * len);
    for k in 0..len {
        for p in 0..len {
            // reduce the integer product first so the angle stays small
            let prod = ((k as f64 - c) * (p as f64 - c)).rem_euclid(len as f64);
            let angle = -2.0 * std::f64::consts::PI * prod / len as f64;
            re.push(angle.cos() * norm);
            im.push(angle.sin() * norm);
        }
    }
    Ok((
        Tensor::from_vec(re, (len, len), device)?.to_dtype(dtype)?,
        Tensor::from_vec(im, (len, len), device)?.to_dtype(dtype)?,
    ))
}

impl CenteredDft {
    pub fn new(m: usize, n: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            m,
            n,
            rows: dft_matrix(m, dtype, device)?,
            cols: dft_matrix(n, dtype, device)?,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    fn apply(&self, x: &CTensor, conj: bool) -> Result<CTensor> {
        let (_, m, n) = x.re.dims3()?;
        if (m, n) != (self.m, self.n) {
            return Err(Error::shape(format!("{}x{}", self.m, self.n), format!("{m}x{n}")));
        }
        let sign = if conj { -1.0 } else { 1.0 };
        let (ar, ai) = &self.rows;
        let ai = (ai * sign)?;
        // left: A X
        let re = (ar.broadcast_matmul(&x.re)? - ai.broadcast_matmul(&x.im)?)?;
        let im = (ar.broadcast_matmul(&x.im)? + ai.broadcast_matmul(&x.re)?)?;
        // right: (A X) B
        let (br, bi) = &self.cols;
        let bi = (bi * sign)?;
        let out_re = (re.broadcast_matmul(br)? - im.broadcast_matmul(&bi)?)?;
        let out_im = (re.broadcast_matmul(&bi)? + im.broadcast_matmul(br)?)?;
        Ok(CTensor { re: out_re, im: out_im })
    }

    pub fn forward(&self, x: &CTensor) -> Result<CTensor> {
        self.apply(x, false)
    }

    pub fn inverse(&self, k: &CTensor) -> Result<CTensor> {
        self.apply(k, true)
    }

    /// `A^H A x = ifft2c(diag(M) fft2c(x))` for row masks `(batch, m)`.
    pub fn normal_op(&self, x: &CTensor, mask: &Tensor) -> Result<CTensor> {
        self.inverse(&self.forward(x)?.mask_rows(mask)?)
    }
}

/// Thresholds at `threshold` in the forward pass and passes gradients
/// through unchanged. The forward value is exactly 0 or 1.
pub fn ste_binarize(p: &Tensor, threshold: f64) -> Result<Tensor> {
    let hard = p.ge(threshold)?.to_dtype(p.dtype())?.detach();
    // p - p.detach() is exactly zero in value but carries d/dp = 1
    Ok((hard + (p - p.detach())?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Row-wise budget normalization of `(batch, h)` values in `[0, 1]` to mean `alpha`.
pub fn normalize_budget(p: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!("sampling ratio {alpha} outside (0, 1)")));
    }
    let eps = match p.dtype() {
        DType::F64 => 1e-12,
        _ => 1e-6,
    };
    let q = p.mean_keepdim(D::Minus1)?;
    let scale_down = (q.clamp(eps, 1.0)?.recip()? * alpha)?;
    let down = p.broadcast_mul(&scale_down)?;
    let scale_up = ((q.affine(-1.0, 1.0)?.clamp(eps, 1.0)?).recip()? * (1.0 - alpha))?;
    let up = p.affine(-1.0, 1.0)?.broadcast_mul(&scale_up)?.affine(-1.0, 1.0)?;
    let choose_down = q.ge(alpha)?.broadcast_as(p.shape())?;
    Ok(choose_down.where_cond(&down, &up)?.clamp(0.0, 1.0)?)
}

/// Square root of non-negative values whose gradient is taken as zero
/// where the input is exactly zero instead of infinite.
pub fn safe_sqrt(s: &Tensor) -> Result<Tensor> {
    let positive = s.gt(0.0)?;
    let root = positive.where_cond(s, &s.ones_like()?)?.sqrt()?;
    Ok(positive.where_cond(&root, &s.zeros_like()?)?)
}

/// Scalar tensor to f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::{fft2c, ifft2c, ComplexImage, KSpace};
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((m, n), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn dense_dft_matches_fft_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dev = Device::Cpu;
        for &(m, n) in &[(8, 8), (7, 10)] {
            let imgs: Vec<_> = (0..3).map(|_| random_grid(&mut rng, m, n)).collect();
            let refs: Vec<_> = imgs.iter().collect();
            let x = CTensor::from_arrays(&refs, DType::F64, &dev).unwrap();
            let dft = CenteredDft::new(m, n, DType::F64, &dev).unwrap();
            let k = dft.forward(&x).unwrap().to_arrays().unwrap();
            let back = dft.inverse(&dft.forward(&x).unwrap()).unwrap().to_arrays().unwrap();
            for (i, img) in imgs.iter().enumerate() {
                let expected = fft2c(&ComplexImage::new(img.clone()).unwrap());
                let err = (&k[i] - expected.data()).iter().map(|v| v.norm()).fold(0.0, f64::max);
                assert!(err < 1e-10, "forward err {err}");
                let inv = ifft2c(&KSpace::new(img.clone()).unwrap());
                let dft_inv = dft.inverse(&CTensor::from_arrays(&[img], DType::F64, &dev).unwrap()).unwrap();
                let err = (&dft_inv.to_arrays().unwrap()[0] - inv.data()).iter().map(|v| v.norm()).fold(0.0, f64::max);
                assert!(err < 1e-10, "inverse err {err}");
                let err = (&back[i] - img).iter().map(|v| v.norm()).fold(0.0, f64::max);
                assert!(err < 1e-10);
            }
        }
    }

    #[test]
    fn channel_pairing_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_grid(&mut rng, 4, 6);
        let x = CTensor::from_arrays(&[&img], DType::F64, &Device::Cpu).unwrap();
        let ch = x.to_channels().unwrap();
        assert_eq!(ch.dims(), &[1, 2, 4, 6]);
        let back = CTensor::from_channels(&ch).unwrap().to_arrays().unwrap();
        assert_eq!(back[0], img);
    }

    #[test]
    fn ste_forward_is_exact_and_backward_is_identity() {
        let dev = Device::Cpu;
        let vals = [0.49, 0.5, 0.51, 0.7, 0.2, 0.999];
        for dtype in [DType::F32, DType::F64] {
            let p = Var::from_tensor(&Tensor::new(&vals, &dev).unwrap().to_dtype(dtype).unwrap()).unwrap();
            let out = ste_binarize(p.as_tensor(), 0.5).unwrap();
            let got: Vec<f64> = out.to_dtype(DType::F64).unwrap().to_vec1().unwrap();
            assert_eq!(got, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
            let g = Tensor::new(&[0.3, -1.2, 2.5, 0.0, 7.0, -0.125], &dev).unwrap().to_dtype(dtype).unwrap();
            let loss = (&out * &g).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let dp = grads.get(&p).unwrap();
            let a: Vec<f64> = dp.to_dtype(DType::F64).unwrap().to_vec1().unwrap();
            let b: Vec<f64> = g.to_dtype(DType::F64).unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn straight_through_chain_equals_sigmoid_gradient() {
        let dev = Device::Cpu;
        let xi = Var::new(&[0.1f64, -0.1, 0.3, -2.0], &dev).unwrap();
        let w = Tensor::new(&[1.0f64, 2.0, -3.0, 0.5], &dev).unwrap();
        let through = (ste_binarize(&sigmoid(xi.as_tensor()).unwrap(), 0.5).unwrap() * &w).unwrap().sum_all().unwrap();
        let soft = (sigmoid(xi.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
        let a: Vec<f64> = through.backward().unwrap().get(&xi).unwrap().to_vec1().unwrap();
        let b: Vec<f64> = soft.backward().unwrap().get(&xi).unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_normalize_matches_scalar_version() {
        let dev = Device::Cpu;
        let rows = vec![
            vec![0.5, 0.5, 1.0, 0.0],
            vec![0.1, 0.1, 0.0, 0.2],
            vec![0.2, 0.4, 0.3, 0.1],
            vec![0.0, 0.0, 0.0, 0.0],
        ];
        let t = rows_to_tensor(&rows, DType::F64, &dev).unwrap();
        for alpha in [0.25, 0.5] {
            let out = tensor_to_rows(&normalize_budget(&t, alpha).unwrap()).unwrap();
            for (r, o) in rows.iter().zip(&out) {
                let expected = crate::masks::normalize_budget(r, alpha).unwrap().values;
                for (a, b) in o.iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-12, "{o:?} vs {expected:?}");
                }
            }
        }
    }

    #[test]
    fn safe_sqrt_is_exact_with_zero_gradient_at_zero() {
        let v = Var::from_tensor(&Tensor::new(&[0.0f64, 4.0, 0.25], &Device::Cpu).unwrap()).unwrap();
        let r = safe_sqrt(v.as_tensor()).unwrap();
        assert_eq!(r.to_vec1::<f64>().unwrap(), vec![0.0, 2.0, 0.5]);
        let g: Vec<f64> = r.sum_all().unwrap().backward().unwrap().get(&v).unwrap().to_vec1().unwrap();
        assert_eq!(g, vec![0.0, 0.25, 1.0]);
    }
}
