//! Cartesian single-coil measurement model.
//!
//! Images and k-space share an `m x n` complex grid. The Fourier transform is
//! orthonormal and DC-centered: the zero frequency sits at `(m/2, n/2)`
//! (integer division), the same layout as `fftshift(fft2(ifftshift(x)))`.
//! Masks act on k-space rows.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// Complex image `x` on an `m x n` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage(Array2<Complex64>);

/// Complex Fourier data, DC at row `m/2`, column `n/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpace(Array2<Complex64>);

fn check_grid(data: &Array2<Complex64>, what: &str) -> Result<()> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(Error::validation(format!("{what} grid must be non-empty")));
    }
    if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

macro_rules! grid_newtype {
    ($name:ident, $what:literal) => {
        impl $name {
            pub fn new(data: Array2<Complex64>) -> Result<Self> {
                check_grid(&data, $what)?;
                Ok(Self(data))
            }

            pub fn zeros(m: usize, n: usize) -> Self {
                Self(Array2::zeros((m, n)))
            }

            pub fn shape(&self) -> (usize, usize) {
                self.0.dim()
            }

            pub fn data(&self) -> &Array2<Complex64> {
                &self.0
            }

            pub fn into_inner(self) -> Array2<Complex64> {
                self.0
            }

            /// Euclidean (Frobenius) norm.
            pub fn norm(&self) -> f64 {
                self.0.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
            }
        }
    };
}

grid_newtype!(ComplexImage, "image");
grid_newtype!(KSpace, "k-space");

impl ComplexImage {
    pub fn from_real(real: &Array2<f64>) -> Result<Self> {
        Self::new(real.mapv(|v| Complex64::new(v, 0.0)))
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.0.mapv(|v| v.norm())
    }
}

/// Anything that assigns a real weight to each k-space row.
pub trait RowMask {
    fn len(&self) -> usize;
    fn weight(&self, row: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl RowMask for [f64] {
    fn len(&self) -> usize {
        <[f64]>::len(self)
    }
    fn weight(&self, row: usize) -> f64 {
        self[row]
    }
}

impl RowMask for Vec<f64> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn weight(&self, row: usize) -> f64 {
        self[row]
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

/// In-place centered 1-D transform along `axis`, unnormalized.
fn centered_fft_axis(data: &mut Array2<Complex64>, axis: Axis, direction: FftDirection) {
    let len = data.len_of(axis);
    let fft = plan(len, direction);
    let half = len / 2;
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for mut lane in data.lanes_mut(axis) {
        // ifftshift: position p goes to (p - len/2) mod len
        for (p, v) in lane.iter().enumerate() {
            buf[(p + len - half) % len] = *v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        // fftshift: frequency index f lands at (f + len/2) mod len
        for (f, v) in buf.iter().enumerate() {
            lane[(f + half) % len] = *v;
        }
    }
}

fn transform(data: &Array2<Complex64>, direction: FftDirection) -> Array2<Complex64> {
    let mut out = data.clone();
    centered_fft_axis(&mut out, Axis(0), direction);
    centered_fft_axis(&mut out, Axis(1), direction);
    let scale = 1.0 / ((out.len()) as f64).sqrt();
    out.mapv_inplace(|v| v * scale);
    out
}

/// Orthonormal centered 2-D Fourier transform.
pub fn fft2c(img: &ComplexImage) -> KSpace {
    KSpace(transform(&img.0, FftDirection::Forward))
}

/// Exact inverse of [`fft2c`].
pub fn ifft2c(k: &KSpace) -> ComplexImage {
    ComplexImage(transform(&k.0, FftDirection::Inverse))
}

/// Scales row `i` of `k` by `mask.weight(i)`.
pub fn apply_mask<M: RowMask + ?Sized>(k: &KSpace, mask: &M) -> Result<KSpace> {
    let (m, _) = k.shape();
    if mask.len() != m {
        return Err(Error::shape(format!("mask of length {m}"), mask.len()));
    }
    let mut out = k.0.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let w = mask.weight(i);
        if w != 1.0 {
            row.mapv_inplace(|v| v * w);
        }
    }
    Ok(KSpace(out))
}

/// `A x = diag(M) F x`.
pub fn measure<M: RowMask + ?Sized>(x: &ComplexImage, mask: &M) -> Result<KSpace> {
    apply_mask(&fft2c(x), mask)
}

/// Inverse transform of the masked k-space, zeros at unsampled rows.
pub fn zero_filled_recon<M: RowMask + ?Sized>(k: &KSpace, mask: &M) -> Result<ComplexImage> {
    Ok(ifft2c(&apply_mask(k, mask)?))
}

/// `A^H y = F^H diag(M) y`; the mask is a real diagonal so it is self-adjoint.
pub fn measurement_adjoint<M: RowMask + ?Sized>(y: &KSpace, mask: &M) -> Result<ComplexImage> {
    zero_filled_recon(y, mask)
}

/// `<a, b> = sum a_i conj(b_i)`.
pub fn inner_product(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((m, n), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn max_abs_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_image_has_centered_dc_only() {
        let img = ComplexImage::new(Array2::from_elem((4, 4), Complex64::new(1.0, 0.0))).unwrap();
        let k = fft2c(&img);
        for ((i, j), v) in k.data().indexed_iter() {
            let expected = if (i, j) == (2, 2) { 4.0 } else { 0.0 };
            assert!((v - Complex64::new(expected, 0.0)).norm() < 1e-12, "({i},{j}) = {v}");
        }
    }

    #[test]
    fn lone_dc_inverts_to_constant() {
        let mut k = Array2::zeros((4, 4));
        k[(2, 2)] = Complex64::new(4.0, 0.0);
        let img = ifft2c(&KSpace::new(k).unwrap());
        for v in img.data() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let zero = ifft2c(&KSpace::zeros(8, 8));
        assert!(zero.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn round_trips_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, n) in &[(8, 8), (9, 12), (16, 10)] {
            let x = ComplexImage::new(random_grid(&mut rng, m, n)).unwrap();
            let k = fft2c(&x);
            assert!(max_abs_diff(ifft2c(&k).data(), x.data()) < 1e-10);
            assert!((k.norm() - x.norm()).abs() < 1e-10);
            let k2 = KSpace::new(random_grid(&mut rng, m, n)).unwrap();
            assert!(max_abs_diff(fft2c(&ifft2c(&k2)).data(), k2.data()) < 1e-10);
        }
    }

    #[test]
    fn matches_direct_dft_sum() {
        // centered DFT written out: K[k,l] = sum x[p,q] w^{(k-c)(p-c)} ... / sqrt(mn)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, n) = (5, 6);
        let x = random_grid(&mut rng, m, n);
        let k = fft2c(&ComplexImage::new(x.clone()).unwrap());
        let (cm, cn) = ((m / 2) as f64, (n / 2) as f64);
        for kr in 0..m {
            for kc in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for p in 0..m {
                    for q in 0..n {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((kr as f64 - cm) * (p as f64 - cm) / m as f64
                                + (kc as f64 - cn) * (q as f64 - cn) / n as f64);
                        acc += x[(p, q)] * Complex64::from_polar(1.0, phase);
                    }
                }
                acc /= ((m * n) as f64).sqrt();
                assert!((acc - k.data()[(kr, kc)]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut g = Array2::zeros((8, 8));
        g[(1, 1)] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(ComplexImage::new(g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mask_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = KSpace::new(random_grid(&mut rng, 4, 4)).unwrap();
        assert_eq!(apply_mask(&k, &vec![1.0; 4]).unwrap(), k);
        assert!(apply_mask(&k, &vec![0.0; 4]).unwrap().data().iter().all(|v| v.norm() == 0.0));
        let masked = apply_mask(&k, &vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i % 2 == 0 { k.data()[(i, j)] } else { Complex64::new(0.0, 0.0) };
                assert_eq!(masked.data()[(i, j)], expected);
            }
        }
        assert!(matches!(apply_mask(&k, &vec![1.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_filled_energy_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ComplexImage::new(random_grid(&mut rng, 8, 8)).unwrap();
        let k = fft2c(&x);
        let full = zero_filled_recon(&k, &vec![1.0; 8]).unwrap();
        assert!(max_abs_diff(full.data(), x.data()) < 1e-10);
        let none = zero_filled_recon(&k, &vec![0.0; 8]).unwrap();
        assert_eq!(none.norm(), 0.0);
        let half: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        assert!(zero_filled_recon(&k, &half).unwrap().norm() <= x.norm());
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = ComplexImage::new(random_grid(&mut rng, 8, 12)).unwrap();
            let y = KSpace::new(random_grid(&mut rng, 8, 12)).unwrap();
            let mask: Vec<f64> = (0..8).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let lhs = inner_product(measure(&x, &mask).unwrap().data(), y.data());
            let rhs = inner_product(x.data(), measurement_adjoint(&y, &mask).unwrap().data());
            assert!((lhs - rhs).norm() <= 1e-8 * lhs.norm().max(1.0));
        }
        let x = ComplexImage::new(random_grid(&mut rng, 8, 8)).unwrap();
        let full = vec![1.0; 8];
        let back = measurement_adjoint(&measure(&x, &full).unwrap(), &full).unwrap();
        assert!(max_abs_diff(back.data(), x.data()) < 1e-10);
        let zero = measurement_adjoint(&fft2c(&x), &vec![0.0; 8]).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }
}
