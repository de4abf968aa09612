//! CPU kernels with explicit backward passes for the hot layers.
//!
//! The generic CPU convolution and the composed normalization graph are slow
//! for the narrow layers used here. Convolutions run on zero-padded planes so
//! every kernel tap becomes one long contiguous multiply-add.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

const NORM_EPS: f64 = 1e-5;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel needs contiguous input"),
    }
}

fn axpy<T: WithDType>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        total += x * y;
    }
    total
}

#[derive(Clone, Copy)]
struct Geometry {
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }
    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }
    fn ho(&self) -> usize {
        self.hp() + 1 - self.k
    }
    fn wo(&self) -> usize {
        self.wp() + 1 - self.k
    }
    /// Flattened span covering every output row at the padded row stride.
    fn span(&self) -> usize {
        (self.ho() - 1) * self.wp() + self.wo()
    }
    fn check(&self) -> candle_core::Result<()> {
        if self.k == 0 || self.hp() < self.k || self.wp() < self.k {
            candle_core::bail!("kernel larger than padded input");
        }
        Ok(())
    }
}

/// Copies `(planes, h, w)` into zero-padded `(planes, h + 2p, w + 2p)`.
fn pad_planes<T: WithDType>(x: &[T], planes: usize, g: &Geometry) -> Vec<T> {
    let (hp, wp) = (g.hp(), g.wp());
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        for y in 0..g.h {
            let src = &x[(p * g.h + y) * g.w..][..g.w];
            out[p * hp * wp + (y + g.pad) * wp + g.pad..][..g.w].copy_from_slice(src);
        }
    }
    out
}

/// Lays `(planes, ho, wo)` out at row stride `wp`, zero in the gaps.
fn widen<T: WithDType>(x: &[T], planes: usize, g: &Geometry) -> Vec<T> {
    let (ho, wo, wp) = (g.ho(), g.wo(), g.wp());
    let mut out = vec![T::zero(); planes * ho * wp];
    for p in 0..planes {
        for y in 0..ho {
            out[(p * ho + y) * wp..][..wo].copy_from_slice(&x[(p * ho + y) * wo..][..wo]);
        }
    }
    out
}

fn forward<T: WithDType>(x: &[T], wt: &[T], g: &Geometry) -> Vec<T> {
    let (hp, wp, ho, wo, kk, span) = (g.hp(), g.wp(), g.ho(), g.wo(), g.k * g.k, g.span());
    let xp = pad_planes(x, g.b * g.ci, g);
    let mut wide = vec![T::zero(); ho * wp];
    let mut out = vec![T::zero(); g.b * g.co * ho * wo];
    for b in 0..g.b {
        for co in 0..g.co {
            wide.iter_mut().for_each(|v| *v = T::zero());
            for ci in 0..g.ci {
                let src = &xp[(b * g.ci + ci) * hp * wp..][..hp * wp];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let a = wt[(co * g.ci + ci) * kk + ky * g.k + kx];
                        axpy(&mut wide[..span], a, &src[ky * wp + kx..]);
                    }
                }
            }
            let dst = &mut out[(b * g.co + co) * ho * wo..][..ho * wo];
            for y in 0..ho {
                dst[y * wo..][..wo].copy_from_slice(&wide[y * wp..][..wo]);
            }
        }
    }
    out
}

fn grad_input<T: WithDType>(grad: &[T], wt: &[T], g: &Geometry) -> Vec<T> {
    let (hp, wp, ho, kk, span) = (g.hp(), g.wp(), g.ho(), g.k * g.k, g.span());
    let gw = widen(grad, g.b * g.co, g);
    let mut plane = vec![T::zero(); hp * wp];
    let mut out = vec![T::zero(); g.b * g.ci * g.h * g.w];
    for b in 0..g.b {
        for ci in 0..g.ci {
            plane.iter_mut().for_each(|v| *v = T::zero());
            for co in 0..g.co {
                let src = &gw[(b * g.co + co) * ho * wp..][..span];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let a = wt[(co * g.ci + ci) * kk + ky * g.k + kx];
                        axpy(&mut plane[ky * wp + kx..][..span], a, src);
                    }
                }
            }
            let dst = &mut out[(b * g.ci + ci) * g.h * g.w..][..g.h * g.w];
            for y in 0..g.h {
                dst[y * g.w..][..g.w].copy_from_slice(&plane[(y + g.pad) * wp + g.pad..][..g.w]);
            }
        }
    }
    out
}

fn grad_weight<T: WithDType>(x: &[T], grad: &[T], g: &Geometry) -> Vec<T> {
    let (hp, wp, ho, kk, span) = (g.hp(), g.wp(), g.ho(), g.k * g.k, g.span());
    let xp = pad_planes(x, g.b * g.ci, g);
    let gw = widen(grad, g.b * g.co, g);
    let mut out = vec![T::zero(); g.co * g.ci * kk];
    for b in 0..g.b {
        for co in 0..g.co {
            let gsrc = &gw[(b * g.co + co) * ho * wp..][..span];
            for ci in 0..g.ci {
                let xsrc = &xp[(b * g.ci + ci) * hp * wp..][..hp * wp];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        out[(co * g.ci + ci) * kk + ky * g.k + kx] += dot(gsrc, &xsrc[ky * wp + kx..]);
                    }
                }
            }
        }
    }
    out
}

macro_rules! dispatch {
    ($s:expr, $f:ident, $($arg:expr),*) => {{
        let out: candle_core::Result<CpuStorage> = match $s {
            CpuStorage::F32(_) => Ok(f32::to_cpu_storage_owned($f::<f32>($($arg),*)?)),
            CpuStorage::F64(_) => Ok(f64::to_cpu_storage_owned($f::<f64>($($arg),*)?)),
            other => Err(candle_core::Error::Msg(format!("kernels support f32 and f64, got {:?}", other.dtype()))),
        };
        out
    }};
}

/// `conv(x, w)` with zero padding `pad`.
struct Conv {
    pad: usize,
}

/// Gradient of the input, computed from `(grad_out, w)`.
struct ConvGradInput {
    pad: usize,
    h: usize,
    w: usize,
}

/// Gradient of the kernel, computed from `(x, grad_out)`.
struct ConvGradWeight {
    pad: usize,
    k: usize,
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "direct-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ci, h, w) = l1.shape().dims4()?;
        let (co, ci2, k, k2) = l2.shape().dims4()?;
        if ci != ci2 || k != k2 {
            candle_core::bail!("conv kernel {:?} does not fit input {:?}", l2.dims(), l1.dims());
        }
        let g = Geometry { b, ci, co, h, w, k, pad: self.pad };
        g.check()?;
        fn run<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, g: &Geometry) -> candle_core::Result<Vec<T>> {
            Ok(forward(slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, g))
        }
        let storage = dispatch!(s1, run, s1, l1, s2, l2, &g)?;
        Ok((storage, Shape::from((b, co, g.ho(), g.wo()))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, k, _) = w.dims4()?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &ConvGradInput { pad: self.pad, h, w: wd })?;
        let gw = x.apply_op2_no_bwd(&grad, &ConvGradWeight { pad: self.pad, k })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "direct-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, co, _, _) = l1.shape().dims4()?;
        let (_, ci, k, _) = l2.shape().dims4()?;
        let g = Geometry { b, ci, co, h: self.h, w: self.w, k, pad: self.pad };
        g.check()?;
        fn run<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, g: &Geometry) -> candle_core::Result<Vec<T>> {
            Ok(grad_input(slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, g))
        }
        let storage = dispatch!(s1, run, s1, l1, s2, l2, &g)?;
        Ok((storage, Shape::from((b, ci, self.h, self.w))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "direct-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ci, h, w) = l1.shape().dims4()?;
        let (_, co, _, _) = l2.shape().dims4()?;
        let g = Geometry { b, ci, co, h, w, k: self.k, pad: self.pad };
        g.check()?;
        fn run<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, g: &Geometry) -> candle_core::Result<Vec<T>> {
            Ok(grad_weight(slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, g))
        }
        let storage = dispatch!(s1, run, s1, l1, s2, l2, &g)?;
        Ok((storage, Shape::from((co, ci, self.k, self.k))))
    }
}

/// Stride-1 2-D convolution (cross-correlation) of `(b, ci, h, w)` by `(co, ci, k, k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    Ok(x.apply_op2(&w, Conv { pad })?)
}

/// Mean and inverse standard deviation of one plane, accumulated in f64.
fn plane_stats<T: WithDType>(x: &[T]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn norm_relu_fwd<T: WithDType>(x: &[T], plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        let (mean, inv) = plane_stats(src);
        let (mean, inv) = (T::from_f64(mean), T::from_f64(inv));
        for (d, &s) in dst.iter_mut().zip(src) {
            let v = (s - mean) * inv;
            *d = if v > T::zero() { v } else { T::zero() };
        }
    }
    out
}

fn norm_relu_bwd<T: WithDType>(x: &[T], grad: &[T], plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ((src, g), dst) in x.chunks(plane).zip(grad.chunks(plane)).zip(out.chunks_mut(plane)) {
        let (mean, inv) = plane_stats(src);
        let n = src.len() as f64;
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for (&s, &gv) in src.iter().zip(g) {
            let xhat = (s.to_f64() - mean) * inv;
            if xhat > 0.0 {
                sum_g += gv.to_f64();
                sum_gx += gv.to_f64() * xhat;
            }
        }
        let (mg, mgx) = (sum_g / n, sum_gx / n);
        for ((d, &s), &gv) in dst.iter_mut().zip(src).zip(g) {
            let xhat = (s.to_f64() - mean) * inv;
            let gm = if xhat > 0.0 { gv.to_f64() } else { 0.0 };
            *d = T::from_f64(inv * (gm - mg - xhat * mgx));
        }
    }
    out
}

struct NormRelu;

struct NormReluGrad;

fn plane_size(l: &Layout) -> candle_core::Result<usize> {
    let (_, _, h, w) = l.shape().dims4()?;
    Ok(h * w)
}

impl CustomOp1 for NormRelu {
    fn name(&self) -> &'static str {
        "instance-norm-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_size(l)?;
        fn run<T: WithDType>(s: &CpuStorage, l: &Layout, plane: usize) -> candle_core::Result<Vec<T>> {
            Ok(norm_relu_fwd(slice::<T>(s, l)?, plane))
        }
        let storage = dispatch!(s, run, s, l, plane)?;
        Ok((storage, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &NormReluGrad)?))
    }
}

impl CustomOp2 for NormReluGrad {
    fn name(&self) -> &'static str {
        "instance-norm-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_size(l1)?;
        fn run<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, plane: usize) -> candle_core::Result<Vec<T>> {
            Ok(norm_relu_bwd(slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, plane))
        }
        let storage = dispatch!(s1, run, s1, l1, s2, l2, plane)?;
        Ok((storage, l1.shape().clone()))
    }
}

/// `relu(instance_norm(x))` over the spatial planes of `(b, c, h, w)`, no affine terms.
pub fn norm_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(NormRelu)?)
}

/// Output length of a valid pooling window sweep.
fn pooled_len(n: usize, k: usize, stride: usize) -> usize {
    (n - k) / stride + 1
}

/// Flat index (within the plane) of the first maximum of every window.
fn window_argmax<T: WithDType>(x: &[T], h: usize, w: usize, k: usize, stride: usize) -> Vec<usize> {
    let (ho, wo) = (pooled_len(h, k, stride), pooled_len(w, k, stride));
    let planes = x.len() / (h * w);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        for yo in 0..ho {
            for xo in 0..wo {
                let mut best = (yo * stride) * w + xo * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (yo * stride + dy) * w + xo * stride + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                idx.push(p * h * w + best);
            }
        }
    }
    idx
}

struct MaxPool {
    k: usize,
    stride: usize,
}

struct MaxPoolGrad {
    k: usize,
    stride: usize,
}

impl MaxPool {
    fn check(&self, h: usize, w: usize) -> candle_core::Result<()> {
        if self.k == 0 || self.stride == 0 || h < self.k || w < self.k {
            candle_core::bail!("pooling window {} larger than {h}x{w}", self.k);
        }
        Ok(())
    }
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        self.check(h, w)?;
        fn run<T: WithDType>(s: &CpuStorage, l: &Layout, h: usize, w: usize, k: usize, stride: usize) -> candle_core::Result<Vec<T>> {
            let x = slice::<T>(s, l)?;
            Ok(window_argmax(x, h, w, k, stride).into_iter().map(|i| x[i]).collect())
        }
        let storage = dispatch!(s, run, s, l, h, w, self.k, self.stride)?;
        let shape = (b, c, pooled_len(h, self.k, self.stride), pooled_len(w, self.k, self.stride));
        Ok((storage, Shape::from(shape)))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = MaxPoolGrad { k: self.k, stride: self.stride };
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max-pool-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, _, h, w) = l1.shape().dims4()?;
        fn run<T: WithDType>(
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            h: usize,
            w: usize,
            k: usize,
            stride: usize,
        ) -> candle_core::Result<Vec<T>> {
            let x = slice::<T>(s1, l1)?;
            let g = slice::<T>(s2, l2)?;
            let mut out = vec![T::zero(); x.len()];
            for (i, &gv) in window_argmax(x, h, w, k, stride).into_iter().zip(g) {
                out[i] += gv;
            }
            Ok(out)
        }
        let storage = dispatch!(s1, run, s1, l1, s2, l2, h, w, self.k, self.stride)?;
        Ok((storage, l1.shape().clone()))
    }
}

/// Max pooling over `k x k` windows at the given stride, no padding. Trailing
/// rows or columns that do not fill a window are dropped. Ties send the
/// gradient to the first maximum in row-major window order.
pub fn max_pool(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(MaxPool { k, stride })?)
}
