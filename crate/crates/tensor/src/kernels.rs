//! Forward and backward kernels on plain tensors.
//!
//! The graph layer in [`crate::graph`] records these; they are also usable directly
//! for inference-only code and as building blocks of oracles.

use crate::error::{Result, TensorError};
use crate::parallel::map_items;
use crate::scalar::gemm;
use crate::{Scalar, Shape, Tensor};

/// Output extent of a strided window; errors unless the window tiles exactly.
pub fn window_extent(op: &'static str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::invalid(op, "stride must be >= 1"));
    }
    if k == 0 {
        return Err(TensorError::invalid(op, "kernel extent must be >= 1"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(TensorError::invalid(
            op,
            format!("kernel {k} larger than padded input {padded}"),
        ));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(TensorError::NonIntegerExtent {
            op,
            detail: format!("({input} + 2*{pad} - {k}) / {stride} + 1"),
        });
    }
    Ok((padded - k) / stride + 1)
}

/// Geometry of a cross-correlation from `(c_in, h, w)` to `(c_out, oh, ow)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// `kernel` is laid out `(c_out, c_in, kh, kw)`.
    pub fn conv(x: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Self> {
        if x.c != kernel.c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x,
                rhs: kernel,
            });
        }
        let oh = window_extent("conv2d", x.h, kernel.h, stride, pad)?;
        let ow = window_extent("conv2d", x.w, kernel.w, stride, pad)?;
        Ok(Self {
            c_in: x.c,
            h: x.h,
            w: x.w,
            c_out: kernel.b,
            kh: kernel.h,
            kw: kernel.w,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// The convolution whose adjoint is a transposed convolution of `x` with a kernel
    /// laid out `(c_in, c_out, kh, kw)`.
    pub fn transposed(x: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Self> {
        if x.c != kernel.b {
            return Err(TensorError::ShapeMismatch {
                op: "deconv2d",
                lhs: x,
                rhs: kernel,
            });
        }
        if stride == 0 {
            return Err(TensorError::invalid("deconv2d", "stride must be >= 1"));
        }
        let grow = |n: usize, k: usize| -> Result<usize> {
            let full = (n - 1) * stride + k;
            if full <= 2 * pad {
                return Err(TensorError::invalid("deconv2d", "padding consumes the whole output"));
            }
            Ok(full - 2 * pad)
        };
        Ok(Self {
            c_in: kernel.c,
            h: grow(x.h, kernel.h)?,
            w: grow(x.w, kernel.w)?,
            c_out: x.c,
            kh: kernel.h,
            kw: kernel.w,
            stride,
            pad,
            oh: x.h,
            ow: x.w,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        let hi = if input + pad <= k {
            0
        } else {
            ((input - 1 + pad - k) / stride + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(src: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let n = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = ConvGeometry::valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (xlo, xhi) = ConvGeometry::valid_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..xlo].iter_mut().for_each(|v| *v = T::zero());
                    line[xhi..].iter_mut().for_each(|v| *v = T::zero());
                    if g.stride == 1 {
                        let ix0 = xlo + kx - g.pad;
                        line[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            line[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let n = g.col_cols();
    dst.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.c_in {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = ConvGeometry::valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (xlo, xhi) = ConvGeometry::valid_range(g.ow, g.w, kx, g.stride, g.pad);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        let ix = ox * g.stride + kx - g.pad;
                        dst_row[ix] = dst_row[ix] + line[ox];
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: b.shape(),
                rhs: Shape::new(1, c, 1, 1),
            });
        }
    }
    Ok(())
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[c % bias.len()];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn assemble<T: Scalar>(shape: Shape, items: Vec<Vec<T>>) -> Tensor<T> {
    let mut data = Vec::with_capacity(shape.numel());
    for item in items {
        data.extend(item);
    }
    Tensor::new(shape, data).expect("kernel output matches its shape")
}

/// Zero-padded cross-correlation. `kernel` is `(c_out, c_in, kh, kw)`, `bias` has
/// `c_out` values.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::conv(x.shape(), kernel.shape(), stride, pad)?;
    check_bias("conv2d", bias, g.c_out)?;
    let (k, n) = (g.col_rows(), g.col_cols());
    let items = map_items(x.shape().b, |b| {
        let mut out = vec![T::zero(); g.c_out * n];
        if g.is_pointwise() {
            gemm(false, false, g.c_out, n, k, kernel.data(), x.item(b), &mut out, false);
        } else {
            let mut cols = vec![T::zero(); k * n];
            im2col(x.item(b), &g, &mut cols);
            gemm(false, false, g.c_out, n, k, kernel.data(), &cols, &mut out, false);
        }
        if let Some(bias) = bias {
            add_channel_bias(&mut out, bias.data(), n);
        }
        out
    });
    Ok(assemble(Shape::new(x.shape().b, g.c_out, g.oh, g.ow), items))
}

/// Gradients of a convolution or transposed convolution; `None` where not requested.
#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

fn spatial_channel_sums<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let s = grad.shape();
    let mut sums = vec![T::zero(); s.c];
    for b in 0..s.b {
        for (c, chunk) in grad.item(b).chunks(s.plane()).enumerate() {
            sums[c] = sums[c] + chunk.iter().copied().sum();
        }
    }
    Tensor::new(Shape::new(1, s.c, 1, 1), sums).expect("bias gradient shape")
}

fn sum_in_order<T: Scalar>(shape: Shape, parts: impl IntoIterator<Item = Vec<T>>) -> Tensor<T> {
    let mut acc = vec![T::zero(); shape.numel()];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    Tensor::new(shape, acc).expect("reduction shape")
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::conv(x.shape(), kernel.shape(), stride, pad)?;
    let expect = Shape::new(x.shape().b, g.c_out, g.oh, g.ow);
    if grad_out.shape() != expect {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            lhs: grad_out.shape(),
            rhs: expect,
        });
    }
    let (k, n) = (g.col_rows(), g.col_cols());
    let parts = map_items(x.shape().b, |b| {
        let go = grad_out.item(b);
        let mut gk = None;
        let mut gx = None;
        if need_kernel {
            let mut local = vec![T::zero(); g.c_out * k];
            if g.is_pointwise() {
                gemm(false, true, g.c_out, k, n, go, x.item(b), &mut local, false);
            } else {
                let mut cols = vec![T::zero(); k * n];
                im2col(x.item(b), &g, &mut cols);
                gemm(false, true, g.c_out, k, n, go, &cols, &mut local, false);
            }
            gk = Some(local);
        }
        if need_input {
            let mut gcols = vec![T::zero(); k * n];
            gemm(true, false, k, n, g.c_out, kernel.data(), go, &mut gcols, false);
            if g.is_pointwise() {
                gx = Some(gcols);
            } else {
                let mut dst = vec![T::zero(); g.c_in * g.h * g.w];
                col2im(&gcols, &g, &mut dst);
                gx = Some(dst);
            }
        }
        (gx, gk)
    });
    let (gxs, gks): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(ConvGrads {
        input: need_input.then(|| assemble(x.shape(), gxs.into_iter().map(Option::unwrap).collect())),
        kernel: need_kernel.then(|| sum_in_order(kernel.shape(), gks.into_iter().map(Option::unwrap))),
        bias: need_bias.then(|| spatial_channel_sums(grad_out)),
    })
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same kernel buffer.
/// `kernel` is `(c_in, c_out, kh, kw)`; the output extent is `(h-1)*stride - 2*pad + kh`.
pub fn deconv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::transposed(x.shape(), kernel.shape(), stride, pad)?;
    check_bias("deconv2d", bias, g.c_in)?;
    let (k, n) = (g.col_rows(), g.col_cols());
    let items = map_items(x.shape().b, |b| {
        let mut cols = vec![T::zero(); k * n];
        gemm(true, false, k, n, g.c_out, kernel.data(), x.item(b), &mut cols, false);
        let mut out = vec![T::zero(); g.c_in * g.h * g.w];
        if g.is_pointwise() {
            out.copy_from_slice(&cols);
        } else {
            col2im(&cols, &g, &mut out);
        }
        if let Some(bias) = bias {
            add_channel_bias(&mut out, bias.data(), g.h * g.w);
        }
        out
    });
    Ok(assemble(Shape::new(x.shape().b, g.c_in, g.h, g.w), items))
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::transposed(x.shape(), kernel.shape(), stride, pad)?;
    let expect = Shape::new(x.shape().b, g.c_in, g.h, g.w);
    if grad_out.shape() != expect {
        return Err(TensorError::ShapeMismatch {
            op: "deconv2d_backward",
            lhs: grad_out.shape(),
            rhs: expect,
        });
    }
    let (k, n) = (g.col_rows(), g.col_cols());
    let parts = map_items(x.shape().b, |b| {
        let go = grad_out.item(b);
        let mut cols = vec![T::zero(); k * n];
        if g.is_pointwise() {
            cols.copy_from_slice(go);
        } else {
            im2col(go, &g, &mut cols);
        }
        let gx = need_input.then(|| {
            let mut out = vec![T::zero(); g.c_out * n];
            gemm(false, false, g.c_out, n, k, kernel.data(), &cols, &mut out, false);
            out
        });
        let gk = need_kernel.then(|| {
            let mut local = vec![T::zero(); g.c_out * k];
            gemm(false, true, g.c_out, k, n, x.item(b), &cols, &mut local, false);
            local
        });
        (gx, gk)
    });
    let (gxs, gks): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(ConvGrads {
        input: need_input.then(|| assemble(x.shape(), gxs.into_iter().map(Option::unwrap).collect())),
        kernel: need_kernel.then(|| sum_in_order(kernel.shape(), gks.into_iter().map(Option::unwrap))),
        bias: need_bias.then(|| spatial_channel_sums(grad_out)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Max,
}

/// Result of a window pooling; `argmax` holds flat input offsets for max mode.
#[derive(Debug)]
pub struct Pooled<T> {
    pub out: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Square-window pooling with zero (average) or `-inf` (max) padding. Average mode
/// divides by the full window area.
pub fn window_pool<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize, mode: PoolMode) -> Result<Pooled<T>> {
    let s = x.shape();
    let oh = window_extent("pool2d", s.h, k, stride, pad)?;
    let ow = window_extent("pool2d", s.w, k, stride, pad)?;
    let out_shape = s.with_hw(oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax.reserve(out_shape.numel());
    }
    let inv_area = T::lit(1.0 / (k * k) as f64);
    let data = x.data();
    let mut window = Vec::with_capacity(k * k);
    // Valid tap range of output index `o` along an axis of length `n`.
    let span = |o: usize, n: usize| {
        let start = (o * stride) as isize - pad as isize;
        let lo = (-start).max(0) as usize;
        let hi = ((n as isize - start).min(k as isize)).max(0) as usize;
        (start, lo, hi)
    };
    let cols: Vec<(isize, usize, usize)> = (0..ow).map(|ox| span(ox, s.w)).collect();
    for bc in 0..s.b * s.c {
        let plane = &data[bc * s.plane()..(bc + 1) * s.plane()];
        let base = bc * s.plane();
        for oy in 0..oh {
            let (y0, ky_lo, ky_hi) = span(oy, s.h);
            for &(x0, kx_lo, kx_hi) in &cols {
                match mode {
                    PoolMode::Average => {
                        window.clear();
                        for ky in ky_lo..ky_hi {
                            let row = (y0 + ky as isize) as usize * s.w;
                            let a = row + (x0 + kx_lo as isize) as usize;
                            let b = row + (x0 + kx_hi as isize) as usize;
                            window.extend_from_slice(&plane[a..b]);
                        }
                        out.push(pairwise_sum(&mut window) * inv_area);
                    }
                    PoolMode::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_at = usize::MAX;
                        for ky in ky_lo..ky_hi {
                            let row = (y0 + ky as isize) as usize * s.w;
                            let a = row + (x0 + kx_lo as isize) as usize;
                            let b = row + (x0 + kx_hi as isize) as usize;
                            for (off, &v) in plane[a..b].iter().enumerate() {
                                // First maximum in scan order wins ties.
                                if v > best || best_at == usize::MAX {
                                    best = v;
                                    best_at = a + off;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(base + best_at);
                    }
                }
            }
        }
    }
    Ok(Pooled {
        out: Tensor::new(out_shape, out)?,
        argmax,
    })
}

/// Non-overlapping `k×k` pooling with stride `k`; extents must divide exactly.
pub fn pool2d<T: Scalar>(x: &Tensor<T>, k: usize, mode: PoolMode) -> Result<Pooled<T>> {
    let s = x.shape();
    if k == 0 {
        return Err(TensorError::invalid("pool2d", "window must be >= 1"));
    }
    for extent in [s.h, s.w] {
        if extent % k != 0 {
            return Err(TensorError::Indivisible {
                op: "pool2d",
                extent,
                factor: k,
            });
        }
    }
    window_pool(x, k, k, 0, mode)
}

/// Tree summation in place. Sums of `2^m` equal values are exact, which keeps
/// average-pool followed by nearest upsampling an exact projection.
fn pairwise_sum<T: Scalar>(v: &mut [T]) -> T {
    let mut n = v.len();
    if n == 0 {
        return T::zero();
    }
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            v[i] = v[2 * i] + v[2 * i + 1];
        }
        if n % 2 == 1 {
            v[half] = v[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    v[0]
}

pub fn window_pool_backward<T: Scalar>(
    in_shape: Shape,
    grad_out: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PoolMode,
    argmax: &[usize],
) -> Tensor<T> {
    let mut gx = vec![T::zero(); in_shape.numel()];
    match mode {
        PoolMode::Max => {
            for (&at, &g) in argmax.iter().zip(grad_out.data()) {
                gx[at] = gx[at] + g;
            }
        }
        PoolMode::Average => {
            let os = grad_out.shape();
            let inv_area = T::lit(1.0 / (k * k) as f64);
            for bc in 0..in_shape.b * in_shape.c {
                let base = bc * in_shape.plane();
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let g = grad_out.data()[(bc * os.h + oy) * os.w + ox] * inv_area;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= in_shape.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= in_shape.w as isize {
                                    continue;
                                }
                                let at = base + iy as usize * in_shape.w + ix as usize;
                                gx[at] = gx[at] + g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, gx).expect("pool gradient shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centres (`align_corners = false`), edge-clamped.
    Bilinear,
}

/// Source taps `(lo, hi, weight_of_hi)` for each output index along one axis.
fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample<T: Scalar>(x: &Tensor<T>, factor: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(TensorError::invalid("upsample", "factor must be >= 1"));
    }
    let s = x.shape();
    let out_shape = s.with_hw(s.h * factor, s.w * factor);
    if factor == 1 {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(out_shape.numel());
    match mode {
        UpsampleMode::Nearest => {
            for plane in x.data().chunks(s.plane()) {
                for oy in 0..out_shape.h {
                    let row = &plane[(oy / factor) * s.w..(oy / factor + 1) * s.w];
                    for ox in 0..out_shape.w {
                        out.push(row[ox / factor]);
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(s.h, factor);
            let tx = bilinear_taps(s.w, factor);
            for plane in x.data().chunks(s.plane()) {
                for &(y0, y1, ly) in &ty {
                    let ly = T::lit(ly);
                    for &(x0, x1, lx) in &tx {
                        let lx = T::lit(lx);
                        let top = plane[y0 * s.w + x0] * (T::one() - lx) + plane[y0 * s.w + x1] * lx;
                        let bot = plane[y1 * s.w + x0] * (T::one() - lx) + plane[y1 * s.w + x1] * lx;
                        out.push(top * (T::one() - ly) + bot * ly);
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn upsample_backward<T: Scalar>(in_shape: Shape, grad_out: &Tensor<T>, factor: usize, mode: UpsampleMode) -> Tensor<T> {
    if factor == 1 {
        return grad_out.clone();
    }
    let os = grad_out.shape();
    let mut gx = vec![T::zero(); in_shape.numel()];
    match mode {
        UpsampleMode::Nearest => {
            for (p, (gplane, dst)) in grad_out.data().chunks(os.plane()).zip(gx.chunks_mut(in_shape.plane())).enumerate() {
                let _ = p;
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let at = (oy / factor) * in_shape.w + ox / factor;
                        dst[at] = dst[at] + gplane[oy * os.w + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(in_shape.h, factor);
            let tx = bilinear_taps(in_shape.w, factor);
            for (gplane, dst) in grad_out.data().chunks(os.plane()).zip(gx.chunks_mut(in_shape.plane())) {
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let ly = T::lit(ly);
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let lx = T::lit(lx);
                        let g = gplane[oy * os.w + ox];
                        let gt = g * (T::one() - ly);
                        let gb = g * ly;
                        let w = in_shape.w;
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (T::one() - lx);
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gt * lx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (T::one() - lx);
                        dst[y1 * w + x1] = dst[y1 * w + x1] + gb * lx;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, gx).expect("upsample gradient shape")
}

/// Per-channel mean and biased variance over `(b, h, w)`, computed in two passes.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> ChannelStats<T> {
    let s = x.shape();
    let count = T::lit((s.b * s.plane()) as f64);
    let mut mean = vec![T::zero(); s.c];
    for b in 0..s.b {
        for (c, plane) in x.item(b).chunks(s.plane()).enumerate() {
            mean[c] = mean[c] + plane.iter().copied().sum();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); s.c];
    for b in 0..s.b {
        for (c, plane) in x.item(b).chunks(s.plane()).enumerate() {
            let m = mean[c];
            var[c] = var[c] + plane.iter().map(|&v| (v - m) * (v - m)).sum();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    ChannelStats { mean, var }
}

/// Normalized activations and their affine image `gamma * xhat + beta`.
pub fn batchnorm_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    for (len, what) in [(gamma.len(), "gamma"), (beta.len(), "beta"), (mean.len(), "mean"), (var.len(), "var")] {
        if len != s.c {
            return Err(TensorError::invalid(
                "batchnorm2d",
                format!("{what} has {len} values for {} channels", s.c),
            ));
        }
    }
    let mut xhat = Vec::with_capacity(s.numel());
    let mut out = Vec::with_capacity(s.numel());
    for b in 0..s.b {
        for (c, plane) in x.item(b).chunks(s.plane()).enumerate() {
            let inv = T::one() / (var[c] + eps).sqrt();
            for &v in plane {
                let n = (v - mean[c]) * inv;
                xhat.push(n);
                out.push(gamma[c] * n + beta[c]);
            }
        }
    }
    Ok((Tensor::new(s, out)?, Tensor::new(s, xhat)?))
}

/// Gradients of batch normalization. With `batch_stats` the statistics are treated
/// as functions of the input (training); otherwise as constants (evaluation).
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &[T],
    var: &[T],
    eps: T,
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = grad_out.shape();
    let count = T::lit((s.b * s.plane()) as f64);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for b in 0..s.b {
        for (c, (g, xh)) in grad_out.item(b).chunks(s.plane()).zip(xhat.item(b).chunks(s.plane())).enumerate() {
            for (&gv, &xv) in g.iter().zip(xh) {
                dbeta[c] = dbeta[c] + gv;
                dgamma[c] = dgamma[c] + gv * xv;
            }
        }
    }
    let mut gx = Vec::with_capacity(s.numel());
    for b in 0..s.b {
        for (c, (g, xh)) in grad_out.item(b).chunks(s.plane()).zip(xhat.item(b).chunks(s.plane())).enumerate() {
            let inv = T::one() / (var[c] + eps).sqrt();
            let scale = gamma[c] * inv;
            if batch_stats {
                let mean_g = dbeta[c] / count;
                let mean_gx = dgamma[c] / count;
                for (&gv, &xv) in g.iter().zip(xh) {
                    gx.push(scale * (gv - mean_g - xv * mean_gx));
                }
            } else {
                gx.extend(g.iter().map(|&gv| scale * gv));
            }
        }
    }
    (Tensor::new(s, gx).expect("bn gradient shape"), dgamma, dbeta)
}

/// Whether `small` broadcasts to `full`: every extent equal or 1.
pub fn broadcastable(small: Shape, full: Shape) -> bool {
    [(small.b, full.b), (small.c, full.c), (small.h, full.h), (small.w, full.w)]
        .iter()
        .all(|&(a, f)| a == f || a == 1)
}

/// Offset into `small` for the element of `full` at `(b, c, y, x)`.
#[inline]
pub fn broadcast_offset(small: Shape, b: usize, c: usize, y: usize, x: usize) -> usize {
    let pick = |i: usize, n: usize| if n == 1 { 0 } else { i };
    ((pick(b, small.b) * small.c + pick(c, small.c)) * small.h + pick(y, small.h)) * small.w + pick(x, small.w)
}

/// Visits every element of `full` with its flat offset and the matching `small` offset.
pub fn for_each_broadcast(full: Shape, small: Shape, mut f: impl FnMut(usize, usize)) {
    let mut at = 0;
    for b in 0..full.b {
        for c in 0..full.c {
            for y in 0..full.h {
                for x in 0..full.w {
                    f(at, broadcast_offset(small, b, c, y, x));
                    at += 1;
                }
            }
        }
    }
}
