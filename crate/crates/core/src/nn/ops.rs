//! CPU kernels with hand-written backward passes, registered as candle custom ops.
//! Every kernel is generic over `f32` and `f64`.

use std::sync::{Arc, Mutex};

use candle_core::backend::BackendStorage;
use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor,
    WithDType,
};
use num_traits::Float;

pub trait Real: WithDType + Float {
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

impl Real for f32 {
    #[inline(always)]
    fn sigmoid(self) -> f32 {
        1.0 / (1.0 + exp_f32(-self))
    }
}

impl Real for f64 {}

/// `exp` for `f32` built only from operations SSE2 vectorizes: range
/// reduction by a rounding shift, a degree-6 polynomial, and exponent bits
/// assembled by integer arithmetic. Relative error stays below 1e-6.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const SHIFT: f32 = 12_582_912.0;
    let x = if x < -87.0 { -87.0 } else if x > 88.0 { 88.0 } else { x };
    let t = x * std::f32::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67 + r * (0.041_666_78 + r * (0.008_333_452 + r * 0.001_388_016_7)))));
    let k = (t.to_bits() as i32).wrapping_sub(SHIFT.to_bits() as i32);
    p * f32::from_bits((k.wrapping_add(127) as u32) << 23)
}

fn f64_of<T: Real>(v: T) -> f64 {
    WithDType::to_f64(v)
}

fn input<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => bail!("custom op expects contiguous input"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn like<T: WithDType>(data: Vec<T>, t: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(data, t.shape(), t.device())
}

macro_rules! by_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => bail!("unsupported dtype {other:?}"),
        }
    };
}

/// `C[m×n] (+)= A[m×k] · B[k×n]`, with optional transposed reads of A and B.
///
/// # Safety
/// The pointers must cover the implied row-major extents.
#[allow(clippy::too_many_arguments)]
unsafe fn mm<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    c: *mut T,
    acc: bool,
    a: *const T,
    a_t: bool,
    b: *const T,
    b_t: bool,
) {
    let (a_cs, a_rs) = if a_t { (m as isize, 1) } else { (1, k as isize) };
    let (b_cs, b_rs) = if b_t { (k as isize, 1) } else { (1, n as isize) };
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c,
            1,
            n as isize,
            acc,
            a,
            a_cs,
            a_rs,
            b,
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

/// Plain matrix product of row-major slices, used by the bench and tests.
pub fn matmul<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T]) -> Vec<T> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    let mut c = vec![T::zero(); m * n];
    unsafe { mm(m, n, k, c.as_mut_ptr(), false, a.as_ptr(), false, b.as_ptr(), false) };
    c
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn im2col<T: Real>(x: &[T], g: Geom, col: &mut [T]) {
    let n = g.oh * g.ow;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                // output columns whose input column lies inside the image
                let lo = (g.pad.saturating_sub(kx)).div_ceil(g.stride).min(g.ow);
                let hi = if g.w + g.pad > kx {
                    ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.ow)
                } else {
                    0
                }
                .max(lo);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * g.h * g.w + iy as usize * g.w..][..g.w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    if hi == lo {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (j, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: Geom, x: &mut [T]) {
    let n = g.oh * g.ow;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * n..(row + 1) * n];
                let lo = (g.pad.saturating_sub(kx)).div_ceil(g.stride).min(g.ow);
                let hi = if g.w + g.pad > kx {
                    ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.ow)
                } else {
                    0
                }
                .max(lo);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let d = &mut x[ci * g.h * g.w + iy as usize * g.w..][..g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    if hi == lo {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (o, v) in d[first..first + (hi - lo)].iter_mut().zip(&s[lo..hi]) {
                            *o += *v;
                        }
                    } else {
                        for (j, v) in s[lo..hi].iter().enumerate() {
                            d[first + j * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Square-kernel 2-D convolution without bias, NCHW input, OIHW weight.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    fn geom(&self, c: usize, h: usize, w: usize, k: usize) -> Result<Geom> {
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            bail!("conv kernel {k} larger than padded input {h}x{w}");
        }
        Ok(Geom {
            c,
            h,
            w,
            k,
            stride: self.stride,
            pad: self.pad,
            oh: (h + 2 * self.pad - k) / self.stride + 1,
            ow: (w + 2 * self.pad - k) / self.stride + 1,
        })
    }

    fn direct(&self, k: usize) -> bool {
        k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_fwd<T: Real>(
    op: &Conv2d,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> Result<(CpuStorage, Shape)> {
    let x = input::<T>(s1, l1)?;
    let wt = input::<T>(s2, l2)?;
    let (b, c, h, w) = l1.shape().dims4()?;
    let (co, ci, k, k2) = l2.shape().dims4()?;
    if ci != c || k != k2 {
        bail!("conv weight {:?} does not fit input {:?}", l2.shape(), l1.shape());
    }
    let g = op.geom(c, h, w, k)?;
    let n = g.oh * g.ow;
    let kk = c * k * k;
    let mut out = vec![T::zero(); b * co * n];
    let mut col = if op.direct(k) { Vec::new() } else { vec![T::zero(); kk * n] };
    for bi in 0..b {
        let xi = &x[bi * c * h * w..(bi + 1) * c * h * w];
        let src = if op.direct(k) {
            xi
        } else {
            im2col(xi, g, &mut col);
            &col
        };
        unsafe {
            mm(co, n, kk, out[bi * co * n..].as_mut_ptr(), false, wt.as_ptr(), false, src.as_ptr(), false)
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, co, g.oh, g.ow))))
}

fn conv_bwd<T: Real>(op: &Conv2d, x: &Tensor, wt: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (b, c, h, w) = x.dims4()?;
    let (co, _, k, _) = wt.dims4()?;
    let g = op.geom(c, h, w, k)?;
    let n = g.oh * g.ow;
    let kk = c * k * k;
    let xv = host::<T>(x)?;
    let wv = host::<T>(wt)?;
    let gv = host::<T>(grad)?;
    let mut gx = vec![T::zero(); b * c * h * w];
    let mut gw = vec![T::zero(); co * kk];
    let mut col = if op.direct(k) { Vec::new() } else { vec![T::zero(); kk * n] };
    for bi in 0..b {
        let xi = &xv[bi * c * h * w..(bi + 1) * c * h * w];
        let gi = &gv[bi * co * n..(bi + 1) * co * n];
        let gxi = &mut gx[bi * c * h * w..(bi + 1) * c * h * w];
        if op.direct(k) {
            unsafe {
                mm(co, kk, n, gw.as_mut_ptr(), bi > 0, gi.as_ptr(), false, xi.as_ptr(), true);
                mm(kk, n, co, gxi.as_mut_ptr(), false, wv.as_ptr(), true, gi.as_ptr(), false);
            }
        } else {
            im2col(xi, g, &mut col);
            unsafe {
                mm(co, kk, n, gw.as_mut_ptr(), bi > 0, gi.as_ptr(), false, col.as_ptr(), true);
                mm(kk, n, co, col.as_mut_ptr(), false, wv.as_ptr(), true, gi.as_ptr(), false);
            }
            col2im(&col, g, gxi);
        }
    }
    Ok((Some(like(gx, x)?), Some(like(gw, wt)?)))
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        by_dtype!(s1.dtype(), conv_fwd(self, s1, l1, s2, l2))
    }

    fn bwd(&self, x: &Tensor, wt: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        by_dtype!(x.dtype(), conv_bwd(self, x, wt, grad))
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2d { stride, pad })
}

/// Per-channel mean and biased variance of the last batch seen in training mode.
pub type BatchStats = Arc<Mutex<Option<(Vec<f64>, Vec<f64>)>>>;

/// Batch normalization over N, H, W of an NCHW tensor, with affine `gamma`/`beta`.
///
/// With `running` set the given statistics are used (inference); otherwise
/// batch statistics are computed and published to `record`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub eps: f64,
    pub running: Option<(Vec<f64>, Vec<f64>)>,
    pub record: Option<BatchStats>,
}

fn channel_stats<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let cnt = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..][..hw].iter().map(|&v| f64_of(v)).sum::<f64>();
        }
        let m = s / cnt;
        let mut q = 0.0;
        for bi in 0..b {
            q += x[(bi * c + ch) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = f64_of(*v) - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / cnt;
    }
    (mean, var)
}

fn dims_nchw(shape: &Shape) -> Result<(usize, usize, usize)> {
    let d = shape.dims();
    if d.len() < 2 {
        bail!("batch norm expects at least 2 dims, got {d:?}");
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}

#[allow(clippy::too_many_arguments)]
fn bn_fwd<T: Real>(
    op: &BatchNorm,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> Result<(CpuStorage, Shape)> {
    let x = input::<T>(s1, l1)?;
    let gamma = input::<T>(s2, l2)?;
    let beta = input::<T>(s3, l3)?;
    let (b, c, hw) = dims_nchw(l1.shape())?;
    if gamma.len() != c || beta.len() != c {
        bail!("batch norm parameters of length {} for {c} channels", gamma.len());
    }
    let (mean, var) = match &op.running {
        Some(stats) => stats.clone(),
        None => {
            let stats = channel_stats(x, b, c, hw);
            if let Some(rec) = &op.record {
                *rec.lock().expect("stats lock") = Some(stats.clone());
            }
            stats
        }
    };
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + op.eps).sqrt();
        let scale = T::from_f64(f64_of(gamma[ch]) * inv);
        let shift = T::from_f64(f64_of(beta[ch]) - f64_of(gamma[ch]) * inv * mean[ch]);
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *o = v * scale + shift;
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

fn bn_bwd<T: Real>(
    op: &BatchNorm,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    grad: &Tensor,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let xv = host::<T>(x)?;
    let gv = host::<T>(grad)?;
    let gam = host::<T>(gamma)?;
    let (b, c, hw) = dims_nchw(x.shape())?;
    let (mean, var) = match &op.running {
        Some(stats) => stats.clone(),
        None => channel_stats(&xv, b, c, hw),
    };
    let cnt = (b * hw) as f64;
    let mut gx = vec![T::zero(); xv.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + op.eps).sqrt();
        let (mut sg, mut sgx) = (0.0, 0.0);
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                let g = f64_of(gv[i]);
                sg += g;
                sgx += g * (f64_of(xv[i]) - mean[ch]) * inv;
            }
        }
        dbeta[ch] = T::from_f64(sg);
        dgamma[ch] = T::from_f64(sgx);
        let gmul = f64_of(gam[ch]) * inv;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                let g = f64_of(gv[i]);
                gx[i] = T::from_f64(if op.running.is_some() {
                    g * gmul
                } else {
                    let xhat = (f64_of(xv[i]) - mean[ch]) * inv;
                    gmul * (g - sg / cnt - xhat * sgx / cnt)
                });
            }
        }
    }
    Ok((Some(like(gx, x)?), Some(like(dgamma, gamma)?), Some(like(dbeta, beta)?)))
}

impl CustomOp3 for BatchNorm {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        by_dtype!(s1.dtype(), bn_fwd(self, s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        by_dtype!(x.dtype(), bn_bwd(self, x, gamma, beta, grad))
    }
}

pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, op: BatchNorm) -> Result<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)
}

#[inline(always)]
fn sig<T: Real>(v: T) -> T {
    v.sigmoid()
}

#[derive(Debug, Clone, Copy)]
struct Sigmoid;

fn sigmoid_fwd<T: Real>(s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
    let out: Vec<T> = input::<T>(s, l)?.iter().map(|&v| sig(v)).collect();
    Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
}

fn sigmoid_bwd<T: Real>(res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
    let y = host::<T>(res)?;
    let g = host::<T>(grad)?;
    let out = y.iter().zip(&g).map(|(&y, &g)| g * y * (T::one() - y)).collect();
    Ok(Some(like(out, res)?))
}

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        by_dtype!(s.dtype(), sigmoid_fwd(s, l))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        by_dtype!(res.dtype(), sigmoid_bwd(res, grad))
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Sigmoid)
}

#[derive(Debug, Clone, Copy)]
struct Silu;

fn silu_fwd<T: Real>(s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
    let out: Vec<T> = input::<T>(s, l)?.iter().map(|&v| v * sig(v)).collect();
    Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
}

fn silu_bwd<T: Real>(arg: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
    let x = host::<T>(arg)?;
    let g = host::<T>(grad)?;
    let out = x
        .iter()
        .zip(&g)
        .map(|(&x, &g)| {
            let s = sig(x);
            g * s * (T::one() + x * (T::one() - s))
        })
        .collect();
    Ok(Some(like(out, arg)?))
}

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        by_dtype!(s.dtype(), silu_fwd(s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        by_dtype!(arg.dtype(), silu_bwd(arg, grad))
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

/// Max pooling with implicit `-inf` padding. Gradients go to the first
/// maximal element of each window, scanning row-major.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    fn out_dim(&self, d: usize) -> Result<usize> {
        if d + 2 * self.pad < self.kernel {
            bail!("pool kernel {} larger than padded input {d}", self.kernel);
        }
        Ok((d + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    /// Flat input offset of the winner for output cell `(oy, ox)` of plane `plane`.
    fn argmax<T: Real>(&self, plane: &[T], h: usize, w: usize, oy: usize, ox: usize) -> usize {
        let mut best: Option<(usize, T)> = None;
        for ky in 0..self.kernel {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let i = iy as usize * w + ix as usize;
                if best.is_none_or(|(_, b)| plane[i] > b) {
                    best = Some((i, plane[i]));
                }
            }
        }
        best.expect("pool window overlaps the input").0
    }
}

fn pool_fwd<T: Real>(op: &MaxPool2d, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
    let x = input::<T>(s, l)?;
    let (b, c, h, w) = l.shape().dims4()?;
    let (oh, ow) = (op.out_dim(h)?, op.out_dim(w)?);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(plane[op.argmax(plane, h, w, oy, ox)]);
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, oh, ow))))
}

fn pool_bwd<T: Real>(op: &MaxPool2d, arg: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
    let x = host::<T>(arg)?;
    let g = host::<T>(grad)?;
    let (b, c, h, w) = arg.dims4()?;
    let (oh, ow) = (op.out_dim(h)?, op.out_dim(w)?);
    let mut gx = vec![T::zero(); x.len()];
    for p in 0..b * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = op.argmax(plane, h, w, oy, ox);
                gx[p * h * w + i] += g[(p * oh + oy) * ow + ox];
            }
        }
    }
    Ok(Some(like(gx, arg)?))
}

impl CustomOp1 for MaxPool2d {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        by_dtype!(s.dtype(), pool_fwd(self, s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        by_dtype!(arg.dtype(), pool_bwd(self, arg, grad))
    }
}

pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2d { kernel, stride, pad })
}

#[derive(Debug, Clone, Copy)]
struct Upsample2x;

fn up_fwd<T: Real>(s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
    let x = input::<T>(s, l)?;
    let (b, c, h, w) = l.shape().dims4()?;
    let mut out = vec![T::zero(); b * c * 4 * h * w];
    for p in 0..b * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, 2 * h, 2 * w))))
}

fn up_bwd<T: Real>(arg: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
    let g = host::<T>(grad)?;
    let (b, c, h, w) = arg.dims4()?;
    let mut gx = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                gx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
            }
        }
    }
    Ok(Some(like(gx, arg)?))
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample_nearest_2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        by_dtype!(s.dtype(), up_fwd(s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        by_dtype!(arg.dtype(), up_bwd(arg, grad))
    }
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let d = candle_core::D::Minus1;
    let shifted = x.broadcast_sub(&x.max_keepdim(d)?.detach())?;
    let e = shifted.exp()?;
    e.broadcast_div(&e.sum_keepdim(d)?)
}
