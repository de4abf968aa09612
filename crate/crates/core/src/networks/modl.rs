use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::unet::{UnetConfig, UnetModel};
use super::Reconstructor;
use crate::error::{Error, Result};
use crate::forward_model::{ComplexImage, KSpace};
use crate::masks::BinaryMask;
use crate::ops::{CTensor, CenteredDft};
use crate::params::ParamStore;

pub const CG_TOL: f64 = 5e-5;
pub const CG_MAX_ITERS: usize = 20;
const TINY: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModlConfig {
    pub denoiser: UnetConfig,
    pub n_blocks: usize,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for ModlConfig {
    fn default() -> Self {
        Self {
            denoiser: UnetConfig {
                in_channels: 2,
                out_channels: 2,
                channels: 64,
                depth: 4,
                residual: false,
            },
            n_blocks: 4,
            cg_tol: CG_TOL,
            cg_max_iters: CG_MAX_ITERS,
        }
    }
}

impl ModlConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.denoiser.in_channels != 2 || self.denoiser.out_channels != 2 {
            return Err(Error::Config("MoDL denoiser maps 2 channels to 2 channels".into()));
        }
        if self.n_blocks == 0 || self.cg_max_iters == 0 || !(self.cg_tol > 0.0) {
            return Err(Error::Config("MoDL needs positive blocks, CG iterations and tolerance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: CTensor,
    pub iters: usize,
    /// Final residual norm per image, relative to the right-hand side norm
    /// (absolute when that norm is zero).
    pub residuals: Vec<f64>,
}

fn per_image(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// Solves `(A^H A + I) x = rhs` per image by conjugate gradients, starting
/// from `x0`. Images that reach tolerance stop updating while the rest continue.
pub fn cg_solve(
    dft: &CenteredDft,
    mask: &Tensor,
    rhs: &CTensor,
    x0: &CTensor,
    tol: f64,
    max_iters: usize,
) -> Result<CgOutcome> {
    let op = |v: &CTensor| -> Result<CTensor> { dft.normal_op(v, mask)?.add(v) };
    let scale: Vec<f64> = per_image(&rhs.real_dot(rhs)?)?
        .into_iter()
        .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
        .collect();
    let mut x = x0.clone();
    let mut r = rhs.sub(&op(&x)?)?;
    let mut p = r.clone();
    let mut rr = r.real_dot(&r)?;
    let mut iters = 0;
    loop {
        let rel: Vec<f64> = per_image(&rr)?.iter().zip(&scale).map(|(v, s)| v.max(0.0).sqrt() / s).collect();
        let active: Vec<f64> = rel.iter().map(|&v| if v > tol { 1.0 } else { 0.0 }).collect();
        if active.iter().all(|&a| a == 0.0) {
            return Ok(CgOutcome { x, iters, residuals: rel });
        }
        if iters == max_iters {
            let worst = rel.iter().copied().fold(0.0, f64::max);
            return Err(Error::CgNotConverged {
                residual: worst,
                tol,
                iters,
            });
        }
        let active = Tensor::from_vec(active, rr.shape(), rr.device())?.to_dtype(rr.dtype())?;
        let ap = op(&p)?;
        let pap = p.real_dot(&ap)?;
        let alpha = (rr.broadcast_div(&(pap + TINY)?)? * &active)?;
        x = x.add(&p.scale(&alpha)?)?;
        r = r.sub(&ap.scale(&alpha)?)?;
        let rr_new = r.real_dot(&r)?;
        let beta = (rr_new.broadcast_div(&(&rr + TINY)?)? * &active)?;
        p = r.add(&p.scale(&beta)?)?;
        rr = rr_new;
        iters += 1;
    }
}

/// Data-consistency step on a single image: solves `(A^H A + I) x = z + A^H y`.
pub fn dc_block(z: &ComplexImage, y: &KSpace, mask: &BinaryMask) -> Result<ComplexImage> {
    dc_block_with(z, y, &mask.as_f64(), CG_TOL, CG_MAX_ITERS).map(|(x, _)| x)
}

/// As [`dc_block`], for any real row mask, returning the final relative residual.
pub fn dc_block_with(z: &ComplexImage, y: &KSpace, mask: &[f64], tol: f64, max_iters: usize) -> Result<(ComplexImage, f64)> {
    let (m, n) = z.shape();
    if y.shape() != (m, n) {
        return Err(Error::shape(format!("{m}x{n}"), format!("{:?}", y.shape())));
    }
    if mask.len() != m {
        return Err(Error::shape(m, mask.len()));
    }
    let dev = Device::Cpu;
    let dft = CenteredDft::new(m, n, DType::F64, &dev)?;
    let mask_t = Tensor::from_vec(mask.to_vec(), (1, m), &dev)?;
    let zt = CTensor::from_arrays(&[z.data()], DType::F64, &dev)?;
    let yt = CTensor::from_arrays(&[y.data()], DType::F64, &dev)?;
    let rhs = zt.add(&dft.inverse(&yt.mask_rows(&mask_t)?)?)?;
    let out = cg_solve(&dft, &mask_t, &rhs, &zt, tol, max_iters)?;
    let x = out.x.to_arrays()?.into_iter().next().expect("one image");
    Ok((ComplexImage::new(x)?, out.residuals[0]))
}

/// Unrolled reconstructor alternating data consistency and a shared denoiser.
#[derive(Debug, Clone)]
pub struct ModlModel {
    cfg: ModlConfig,
    denoiser: UnetModel,
}

impl ModlModel {
    pub fn new(cfg: ModlConfig, store: ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let denoiser = UnetModel::new(cfg.denoiser, store, rng)?;
        Ok(Self { cfg, denoiser })
    }

    pub fn config(&self) -> &ModlConfig {
        &self.cfg
    }

    pub fn denoiser(&self) -> &UnetModel {
        &self.denoiser
    }

    /// Denoiser output after every block; the last entry is the reconstruction.
    pub fn forward_blocks(&self, y: &CTensor, mask: &Tensor, dft: &CenteredDft) -> Result<Vec<CTensor>> {
        let aty = dft.inverse(&y.mask_rows(mask)?)?;
        let mut z = aty.clone();
        let mut outputs = Vec::with_capacity(self.cfg.n_blocks);
        for _ in 0..self.cfg.n_blocks {
            let rhs = z.add(&aty)?;
            let x = cg_solve(dft, mask, &rhs, &z, self.cfg.cg_tol, self.cfg.cg_max_iters)?.x;
            z = CTensor::from_channels(&self.denoiser.forward(&x.to_channels()?)?)?;
            outputs.push(z.clone());
        }
        Ok(outputs)
    }
}

impl Reconstructor for ModlModel {
    fn reconstruct(&self, y: &CTensor, mask: &Tensor, dft: &CenteredDft) -> Result<Tensor> {
        let last = self.forward_blocks(y, mask, dft)?.pop().expect("at least one block");
        last.abs()
    }

    fn params(&self) -> Option<&ParamStore> {
        Some(self.denoiser.store())
    }

    fn kind(&self) -> &'static str {
        "modl"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::{fft2c, ifft2c};
    use crate::masks::make_random_mask;
    use nalgebra::{DMatrix, DVector};
    use ndarray::Array2;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut ChaCha8Rng, m: usize, n: usize) -> ComplexImage {
        ComplexImage::new(Array2::from_shape_fn((m, n), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        }))
        .unwrap()
    }

    fn max_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        (a - b).iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn full_mask_halves_the_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_image(&mut rng, 8, 8);
        let x = random_image(&mut rng, 8, 8);
        let full = BinaryMask::new(vec![1; 8], 2).unwrap();
        let y = fft2c(&x);
        let got = dc_block(&z, &y, &full).unwrap();
        let expected = (z.data() + x.data()).mapv(|v| v / 2.0);
        assert!(max_diff(got.data(), &expected) < 1e-4);
    }

    #[test]
    fn empty_mask_returns_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_image(&mut rng, 8, 8);
        let y = fft2c(&random_image(&mut rng, 8, 8));
        let (got, res) = dc_block_with(&z, &y, &[0.0; 8], CG_TOL, CG_MAX_ITERS).unwrap();
        assert!(max_diff(got.data(), z.data()) < 1e-4);
        assert!(res <= CG_TOL);
    }

    /// Dense matrix of the centered 2-D DFT acting on row-major vectorized images.
    fn dense_dft(m: usize, n: usize) -> DMatrix<Complex64> {
        let mut f = DMatrix::zeros(m * n, m * n);
        for p in 0..m * n {
            let mut e = Array2::zeros((m, n));
            e[[p / n, p % n]] = Complex64::new(1.0, 0.0);
            let col = fft2c(&ComplexImage::new(e).unwrap());
            for (q, v) in col.data().iter().enumerate() {
                f[(q, p)] = *v;
            }
        }
        f
    }

    #[test]
    fn matches_dense_solve() {
        let (m, n) = (8, 8);
        let f = dense_dft(m, n);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let z = random_image(&mut rng, m, n);
            let mask = make_random_mask(m, 2, 3, &mut rng).unwrap();
            let y = fft2c(&random_image(&mut rng, m, n));
            let d = DMatrix::from_fn(m * n, m * n, |i, j| {
                if i == j {
                    Complex64::new(mask.rows()[i / n] as f64, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            let a = &d * &f;
            let lhs = a.adjoint() * &a + DMatrix::identity(m * n, m * n);
            let yv = DVector::from_iterator(m * n, y.data().iter().copied());
            let zv = DVector::from_iterator(m * n, z.data().iter().copied());
            let rhs = &zv + a.adjoint() * &yv;
            let dense = lhs.lu().solve(&rhs).unwrap();
            let got = dc_block(&z, &y, &mask).unwrap();
            let dev = got.data().iter().zip(dense.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(dev < 1e-4, "seed {seed}: {dev}");
        }
    }

    #[test]
    fn accepted_solves_meet_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..10 {
            let z = random_image(&mut rng, 8, 12);
            let y = fft2c(&random_image(&mut rng, 8, 12));
            let mask: Vec<f64> = (0..8).map(|_| rng.random_range(0..2) as f64).collect();
            let (x, _) = dc_block_with(&z, &y, &mask, CG_TOL, CG_MAX_ITERS).unwrap();
            // true residual, computed with the FFT route
            let kx = fft2c(&x);
            let masked = Array2::from_shape_fn((8, 12), |(i, j)| kx.data()[[i, j]] * mask[i]);
            let normal = ifft2c(&KSpace::new(masked).unwrap());
            let ym = Array2::from_shape_fn((8, 12), |(i, j)| y.data()[[i, j]] * mask[i]);
            let rhs = z.data() + ifft2c(&KSpace::new(ym).unwrap()).data();
            let res = normal.data() + x.data() - &rhs;
            let rel = res.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt() / rhs.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!(rel <= CG_TOL, "{rel}");
        }
    }

    #[test]
    fn iteration_cap_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = random_image(&mut rng, 8, 8);
        let y = fft2c(&random_image(&mut rng, 8, 8));
        let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let err = dc_block_with(&z, &y, &mask, 1e-30, 1).unwrap_err();
        assert!(matches!(err, Error::CgNotConverged { iters: 1, .. }));
    }

    fn tiny_modl(residual: bool, dtype: DType) -> ModlModel {
        let mut cfg = ModlConfig::default();
        cfg.denoiser.channels = 2;
        cfg.denoiser.depth = 2;
        cfg.denoiser.residual = residual;
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        ModlModel::new(cfg, ParamStore::new(dtype, Device::Cpu), &mut rng).unwrap()
    }

    #[test]
    fn runs_the_configured_number_of_blocks() {
        let net = tiny_modl(false, DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_image(&mut rng, 16, 16);
        let dft = CenteredDft::new(16, 16, DType::F32, &Device::Cpu).unwrap();
        let mask = Tensor::ones((1, 16), DType::F32, &Device::Cpu).unwrap();
        let y = CTensor::from_arrays(&[fft2c(&x).data()], DType::F32, &Device::Cpu).unwrap();
        let outs = net.forward_blocks(&y, &mask, &dft).unwrap();
        assert_eq!(outs.len(), 4);
        assert_eq!(net.reconstruct(&y, &mask, &dft).unwrap().dims(), &[1, 16, 16]);
    }

    #[test]
    fn identity_denoiser_with_full_mask_does_not_drift() {
        let net = tiny_modl(true, DType::F64);
        net.denoiser().zero_head().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = random_image(&mut rng, 16, 16);
        let dft = CenteredDft::new(16, 16, DType::F64, &Device::Cpu).unwrap();
        let mask = Tensor::ones((1, 16), DType::F64, &Device::Cpu).unwrap();
        let y = CTensor::from_arrays(&[fft2c(&x).data()], DType::F64, &Device::Cpu).unwrap();
        let mut prev = f64::INFINITY;
        for out in net.forward_blocks(&y, &mask, &dft).unwrap() {
            let err = (&out.to_arrays().unwrap()[0] - x.data()).iter().map(|v| v.norm_sqr()).sum::<f64>()
                / x.data().iter().map(|v| v.norm_sqr()).sum::<f64>();
            assert!(err <= prev + 1e-12);
            assert!(err < 1e-8);
            prev = err;
        }
    }

    #[test]
    fn gradients_reach_the_denoiser_through_cg() {
        let net = tiny_modl(false, DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = random_image(&mut rng, 16, 16);
        let mask_rows = make_random_mask(16, 4, 4, &mut rng).unwrap().as_f64();
        let dft = CenteredDft::new(16, 16, DType::F64, &Device::Cpu).unwrap();
        let mask = Tensor::from_vec(mask_rows, (1, 16), &Device::Cpu).unwrap();
        let y = CTensor::from_arrays(&[fft2c(&x).data()], DType::F64, &Device::Cpu).unwrap().mask_rows(&mask).unwrap();
        let gt = Tensor::from_vec(x.magnitude().into_raw_vec_and_offset().0, (1, 16, 16), &Device::Cpu).unwrap();
        let loss = (net.reconstruct(&y, &mask, &dft).unwrap() - gt).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let total: f64 = net
            .denoiser()
            .store()
            .iter()
            .map(|(_, v)| grads.get(v).map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()).unwrap_or(0.0))
            .sum();
        assert!(total > 0.0 && total.is_finite());
    }
}
