//! Differentiable ops on [`Var`].

use crate::error::{Result, TensorError};
use crate::graph::{Mode, Var};
use crate::kernels::{self, ChannelStats, PoolMode, UpsampleMode};
use crate::{Scalar, Shape, Tensor};

/// Reduction used by [`Var::global_pool`] and [`Var::channel_reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

fn broadcast_check<T: Scalar>(op: &'static str, full: &Tensor<T>, small: &Tensor<T>) -> Result<()> {
    if !kernels::broadcastable(small.shape(), full.shape()) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: full.shape(),
            rhs: small.shape(),
        });
    }
    Ok(())
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn conv2d(&self, kernel: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let out = kernels::conv2d(self.value(), kernel.value(), bias.map(|b| b.value()), stride, pad)?;
        let ks = kernel.shape();
        self.graph.add_macs((out.numel() * ks.c * ks.h * ks.w) as u64);
        let (x, k) = (self.value_rc(), kernel.value_rc());
        let bias_shape = bias.map(|b| b.shape());
        let mut inputs = vec![self, kernel];
        inputs.extend(bias);
        Ok(self.graph.custom_op(out, &inputs, move |g, needs| {
            let need_bias = needs.get(2).copied().unwrap_or(false);
            let grads = kernels::conv2d_backward(&x, &k, g, stride, pad, needs[0], needs[1], need_bias)?;
            let mut res = vec![grads.input, grads.kernel];
            if let Some(shape) = bias_shape {
                res.push(grads.bias.map(|b| b.reshape(shape)).transpose()?);
            }
            Ok(res)
        }))
    }

    /// Transposed convolution; `kernel` is `(c_in, c_out, kh, kw)`.
    pub fn deconv2d(&self, kernel: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let out = kernels::deconv2d(self.value(), kernel.value(), bias.map(|b| b.value()), stride, pad)?;
        self.graph.add_macs((self.value().numel() * kernel.shape().item_len()) as u64);
        let (x, k) = (self.value_rc(), kernel.value_rc());
        let bias_shape = bias.map(|b| b.shape());
        let mut inputs = vec![self, kernel];
        inputs.extend(bias);
        Ok(self.graph.custom_op(out, &inputs, move |g, needs| {
            let need_bias = needs.get(2).copied().unwrap_or(false);
            let grads = kernels::deconv2d_backward(&x, &k, g, stride, pad, needs[0], needs[1], need_bias)?;
            let mut res = vec![grads.input, grads.kernel];
            if let Some(shape) = bias_shape {
                res.push(grads.bias.map(|b| b.reshape(shape)).transpose()?);
            }
            Ok(res)
        }))
    }

    /// Non-overlapping pooling with window and stride `k`.
    pub fn pool2d(&self, k: usize, mode: PoolMode) -> Result<Var<'g, T>> {
        let pooled = kernels::pool2d(self.value(), k, mode)?;
        self.record_pool(pooled, k, k, 0, mode)
    }

    /// General square-window pooling (used for the stride-1 max pool in inception).
    pub fn window_pool(&self, k: usize, stride: usize, pad: usize, mode: PoolMode) -> Result<Var<'g, T>> {
        let pooled = kernels::window_pool(self.value(), k, stride, pad, mode)?;
        self.record_pool(pooled, k, stride, pad, mode)
    }

    fn record_pool(&self, pooled: kernels::Pooled<T>, k: usize, stride: usize, pad: usize, mode: PoolMode) -> Result<Var<'g, T>> {
        let in_shape = self.shape();
        let argmax = pooled.argmax;
        Ok(self.unary(pooled.out, move |g| {
            Ok(kernels::window_pool_backward(in_shape, g, k, stride, pad, mode, &argmax))
        }))
    }

    pub fn upsample(&self, factor: usize, mode: UpsampleMode) -> Result<Var<'g, T>> {
        let out = kernels::upsample(self.value(), factor, mode)?;
        let in_shape = self.shape();
        Ok(self.unary(out, move |g| Ok(kernels::upsample_backward(in_shape, g, factor, mode))))
    }

    /// Batch normalization. Returns the output and, in training mode, the batch
    /// statistics used (for running-stat updates by the caller).
    pub fn batchnorm(
        &self,
        gamma: &Var<'g, T>,
        beta: &Var<'g, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<(Var<'g, T>, Option<ChannelStats<T>>)> {
        let c = self.shape().c;
        for p in [gamma.value(), beta.value(), running_mean, running_var] {
            if p.numel() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm2d",
                    lhs: self.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let train = self.graph.mode() == Mode::Train;
        let stats = if train {
            kernels::channel_stats(self.value())
        } else {
            ChannelStats {
                mean: running_mean.data().to_vec(),
                var: running_var.data().to_vec(),
            }
        };
        let (out, xhat) =
            kernels::batchnorm_apply(self.value(), gamma.value().data(), beta.value().data(), &stats.mean, &stats.var, eps)?;
        let gamma_v = gamma.value_rc();
        let (gshape, bshape) = (gamma.shape(), beta.shape());
        let var = stats.var.clone();
        let v = self.graph.custom_op(out, &[self, gamma, beta], move |g, _| {
            let (gx, dgamma, dbeta) = kernels::batchnorm_backward(g, &xhat, gamma_v.data(), &var, eps, train);
            Ok(vec![Some(gx), Some(Tensor::new(gshape, dgamma)?), Some(Tensor::new(bshape, dbeta)?)])
        });
        Ok((v, train.then_some(stats)))
    }

    pub fn relu(&self) -> Var<'g, T> {
        let x = self.value_rc();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(out, move |g| g.zip_map(&x, "relu", |g, v| if v > T::zero() { g } else { T::zero() }))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let out = self.value().map(sigmoid);
        let y = std::rc::Rc::new(out.clone());
        self.unary(out, move |g| g.zip_map(&y, "sigmoid", |g, y| g * y * (T::one() - y)))
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().zip_map(other.value(), "add", |a, b| a + b)?;
        Ok(self
            .graph
            .custom_op(out, &[self, other], |g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().zip_map(other.value(), "sub", |a, b| a - b)?;
        Ok(self
            .graph
            .custom_op(out, &[self, other], |g, _| Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))])))
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().zip_map(other.value(), "mul", |a, b| a * b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        Ok(self.graph.custom_op(out, &[self, other], move |g, needs| {
            Ok(vec![
                needs[0].then(|| g.zip_map(&b, "mul", |g, b| g * b)).transpose()?,
                needs[1].then(|| g.zip_map(&a, "mul", |g, a| g * a)).transpose()?,
            ])
        }))
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        self.unary(self.value().scale(s), move |g| Ok(g.scale(s)))
    }

    /// `self + other` where every extent of `other` equals `self`'s or is 1.
    pub fn add_broadcast(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        broadcast_check("add_broadcast", self.value(), other.value())?;
        let (full, small) = (self.shape(), other.shape());
        let mut out = self.value().clone();
        let od = other.value().data();
        {
            let data = out.data_mut();
            kernels::for_each_broadcast(full, small, |i, j| data[i] = data[i] + od[j]);
        }
        Ok(self.graph.custom_op(out, &[self, other], move |g, needs| {
            let gs = needs[1].then(|| {
                let mut acc = vec![T::zero(); small.numel()];
                let gd = g.data();
                kernels::for_each_broadcast(full, small, |i, j| acc[j] = acc[j] + gd[i]);
                Tensor::new(small, acc)
            });
            Ok(vec![Some(g.clone()), gs.transpose()?])
        }))
    }

    /// `self * other` with `other` broadcast as in [`Var::add_broadcast`].
    pub fn mul_broadcast(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        broadcast_check("mul_broadcast", self.value(), other.value())?;
        let (full, small) = (self.shape(), other.shape());
        let (a, b) = (self.value_rc(), other.value_rc());
        let mut out = self.value().clone();
        {
            let data = out.data_mut();
            let bd = b.data();
            kernels::for_each_broadcast(full, small, |i, j| data[i] = data[i] * bd[j]);
        }
        Ok(self.graph.custom_op(out, &[self, other], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut acc = vec![T::zero(); full.numel()];
                let bd = b.data();
                kernels::for_each_broadcast(full, small, |i, j| acc[i] = gd[i] * bd[j]);
                Tensor::new(full, acc)
            });
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); small.numel()];
                let ad = a.data();
                kernels::for_each_broadcast(full, small, |i, j| acc[j] = acc[j] + gd[i] * ad[i]);
                Tensor::new(small, acc)
            });
            Ok(vec![ga.transpose()?, gb.transpose()?])
        }))
    }

    /// Spatial reduction to `(b, c, 1, 1)`.
    pub fn global_pool(&self, how: Reduce) -> Var<'g, T> {
        let s = self.shape();
        let plane = s.plane();
        let x = self.value_rc();
        let mut out = Vec::with_capacity(s.b * s.c);
        let mut arg = Vec::new();
        for (p, chunk) in x.data().chunks(plane).enumerate() {
            match how {
                Reduce::Mean => out.push(chunk.iter().copied().sum::<T>() / T::lit(plane as f64)),
                Reduce::Max => {
                    let (i, m) = argmax(chunk);
                    out.push(m);
                    arg.push(p * plane + i);
                }
            }
        }
        let out = Tensor::new(s.with_hw(1, 1), out).expect("global pool shape");
        self.unary(out, move |g| {
            let mut gx = vec![T::zero(); s.numel()];
            match how {
                Reduce::Mean => {
                    let inv = T::lit(1.0 / plane as f64);
                    for (p, chunk) in gx.chunks_mut(plane).enumerate() {
                        let v = g.data()[p] * inv;
                        chunk.iter_mut().for_each(|c| *c = v);
                    }
                }
                Reduce::Max => {
                    for (&at, &gv) in arg.iter().zip(g.data()) {
                        gx[at] = gv;
                    }
                }
            }
            Tensor::new(s, gx)
        })
    }

    /// Reduction over channels to `(b, 1, h, w)`.
    pub fn channel_reduce(&self, how: Reduce) -> Var<'g, T> {
        let s = self.shape();
        let plane = s.plane();
        let x = self.value_rc();
        let mut out = Vec::with_capacity(s.b * plane);
        let mut arg = Vec::new();
        for b in 0..s.b {
            let item = x.item(b);
            for p in 0..plane {
                let column = (0..s.c).map(|c| item[c * plane + p]);
                match how {
                    Reduce::Mean => out.push(column.sum::<T>() / T::lit(s.c as f64)),
                    Reduce::Max => {
                        let vals: Vec<T> = column.collect();
                        let (c, m) = argmax(&vals);
                        out.push(m);
                        arg.push(b * s.item_len() + c * plane + p);
                    }
                }
            }
        }
        let out = Tensor::new(s.with_c(1), out).expect("channel reduce shape");
        self.unary(out, move |g| {
            let mut gx = vec![T::zero(); s.numel()];
            match how {
                Reduce::Mean => {
                    let inv = T::lit(1.0 / s.c as f64);
                    for b in 0..s.b {
                        for c in 0..s.c {
                            for p in 0..plane {
                                gx[b * s.item_len() + c * plane + p] = g.data()[b * plane + p] * inv;
                            }
                        }
                    }
                }
                Reduce::Max => {
                    for (&at, &gv) in arg.iter().zip(g.data()) {
                        gx[at] = gv;
                    }
                }
            }
            Tensor::new(s, gx)
        })
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let out = self.value().slice_channels(start, len)?;
        let s = self.shape();
        Ok(self.unary(out, move |g| {
            let mut gx = vec![T::zero(); s.numel()];
            let plane = s.plane();
            for b in 0..s.b {
                let dst = (b * s.c + start) * plane;
                gx[dst..dst + len * plane].copy_from_slice(g.item(b));
            }
            Tensor::new(s, gx)
        }))
    }

    /// Channel concatenation in argument order.
    pub fn concat(parts: &[&Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "empty input list"))?;
        let values: Vec<&Tensor<T>> = parts.iter().map(|v| v.value()).collect();
        let out = Tensor::concat_channels(&values)?;
        let widths: Vec<usize> = parts.iter().map(|v| v.shape().c).collect();
        Ok(first.graph.custom_op(out, parts, move |g, needs| {
            let mut start = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (&c, &need) in widths.iter().zip(needs) {
                res.push(need.then(|| g.slice_channels(start, c)).transpose()?);
                start += c;
            }
            Ok(res)
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'g, T> {
        let s = self.shape();
        self.unary(Tensor::scalar(self.value().sum()), move |g| Ok(Tensor::full(s, g.data()[0])))
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// `Σ self ⊙ weights` as a scalar; `weights` is a constant.
    pub fn dot_const(&self, weights: &Tensor<T>) -> Result<Var<'g, T>> {
        let v = self.value().dot(weights)?;
        let w = weights.clone();
        Ok(self.unary(Tensor::scalar(v), move |g| Ok(w.scale(g.data()[0]))))
    }

    /// `Σ weight · BCE(sigmoid(self), target)` computed stably from logits.
    pub fn bce_with_logits_sum(&self, target: &Tensor<T>, weight: Option<&Tensor<T>>) -> Result<Var<'g, T>> {
        self.value().expect_same_shape(target, "bce_with_logits")?;
        if let Some(w) = weight {
            self.value().expect_same_shape(w, "bce_with_logits")?;
        }
        let x = self.value_rc();
        let t = target.clone();
        let w = weight.cloned();
        let wt = |i: usize| w.as_ref().map_or(T::one(), |w| w.data()[i]);
        let mut total = T::zero();
        for (i, (&xv, &tv)) in x.data().iter().zip(t.data()).enumerate() {
            let l = xv.max(T::zero()) - xv * tv + (T::one() + (-xv.abs()).exp()).ln();
            total = total + wt(i) * l;
        }
        Ok(self.unary(Tensor::scalar(total), move |g| {
            let gs = g.data()[0];
            let data = x
                .data()
                .iter()
                .zip(t.data())
                .enumerate()
                .map(|(i, (&xv, &tv))| gs * w.as_ref().map_or(T::one(), |w| w.data()[i]) * (sigmoid(xv) - tv))
                .collect();
            Tensor::new(x.shape(), data)
        }))
    }

    /// `Σ mask · smoothL1(self − target)` with transition point `beta`.
    pub fn smooth_l1_sum(&self, target: &Tensor<T>, mask: &Tensor<T>, beta: T) -> Result<Var<'g, T>> {
        self.value().expect_same_shape(target, "smooth_l1")?;
        self.value().expect_same_shape(mask, "smooth_l1")?;
        let x = self.value_rc();
        let (t, m) = (target.clone(), mask.clone());
        let half = T::lit(0.5);
        let mut total = T::zero();
        for ((&xv, &tv), &mv) in x.data().iter().zip(t.data()).zip(m.data()) {
            if mv == T::zero() {
                continue;
            }
            let d = (xv - tv).abs();
            let l = if d < beta { half * d * d / beta } else { d - half * beta };
            total = total + mv * l;
        }
        Ok(self.unary(Tensor::scalar(total), move |g| {
            let gs = g.data()[0];
            let data = x
                .data()
                .iter()
                .zip(t.data())
                .zip(m.data())
                .map(|((&xv, &tv), &mv)| {
                    let d = xv - tv;
                    let slope = if d.abs() < beta { d / beta } else { d.signum() };
                    gs * mv * slope
                })
                .collect();
            Tensor::new(x.shape(), data)
        }))
    }

    /// Sum of same-shaped vars.
    pub fn sum_all(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| TensorError::invalid("sum_all", "empty input list"))?;
        rest.iter().try_fold(first.clone(), |acc, v| acc.add(v))
    }

    pub fn reshape(&self, shape: Shape) -> Result<Var<'g, T>> {
        let s = self.shape();
        let out = self.value().clone().reshape(shape)?;
        Ok(self.unary(out, move |g| g.clone().reshape(s)))
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn argmax<T: Scalar>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
