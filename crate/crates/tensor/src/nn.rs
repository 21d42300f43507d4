//! Parameters, the module visitor, and the three parameterized layers.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Mode, Var};
use crate::{Scalar, Shape, Tensor};

/// Batch-norm running-statistic momentum.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// A named tensor owned by a module. Non-trainable params are buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: false,
        }
    }
}

pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Count of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.numel();
            }
        });
        n
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

macro_rules! tuple_module {
    ($($name:ident . $idx:tt),+) => {
        impl<T: Scalar, $($name: Module<T>),+> Module<T> for ($($name,)+) {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
                $( self.$idx.visit(f); )+
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
                $( self.$idx.visit_mut(f); )+
            }
        }
    };
}

tuple_module!(A.0, B.1);
tuple_module!(A.0, B.1, C.2);

/// A flat list of params, for checking closures over loose tensors.
#[derive(Clone, Debug)]
pub struct LeafSet<T>(pub Vec<Param<T>>);

impl<T: Scalar> Module<T> for LeafSet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.0.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.0.iter_mut().for_each(f);
    }
}

/// Writes queued buffer updates from a training graph back into `module`.
pub fn apply_buffer_updates<T: Scalar>(module: &mut impl Module<T>, updates: Vec<(String, Tensor<T>)>) {
    if updates.is_empty() {
        return;
    }
    let map: std::collections::HashMap<String, Tensor<T>> = updates.into_iter().collect();
    module.visit_mut(&mut |p| {
        if let Some(v) = map.get(&p.name) {
            p.value = v.clone();
        }
    });
}

/// Kaiming normal, fan-in scaling for a ReLU network.
pub fn kaiming<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Cross-correlation layer with kernel `(c_out, c_in, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = Shape::new(c_out, c_in, k, k);
        Self {
            weight: Param::new(format!("{name}.weight"), kaiming(shape, c_in * k * k, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)))),
            stride,
            pad,
        }
    }

    /// Same-size convolution: odd `k`, stride 1, pad `k / 2`.
    pub fn same(name: &str, c_in: usize, c_out: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Self {
        assert!(k % 2 == 1, "same-size convolution needs an odd kernel, got {k}");
        Self::new(name, c_in, c_out, k, 1, k / 2, bias, rng)
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape().b
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        x.conv2d(&w, b.as_ref(), self.stride, self.pad)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Transposed convolution with kernel `(c_in, c_out, k, k)`.
#[derive(Clone, Debug)]
pub struct Deconv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Deconv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = Shape::new(c_in, c_out, k, k);
        // Each output pixel receives about c_in * k * k / stride^2 taps.
        let fan_in = (c_in * k * k / (stride * stride)).max(1);
        Self {
            weight: Param::new(format!("{name}.weight"), kaiming(shape, fan_in, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)))),
            stride,
            pad,
        }
    }

    /// Exact 2x upsampling deconvolution: kernel 4, stride 2, pad 1.
    pub fn double(name: &str, c_in: usize, c_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::new(name, c_in, c_out, 4, 2, 1, bias, rng)
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        x.deconv2d(&w, b.as_ref(), self.stride, self.pad)
    }
}

impl<T: Scalar> Module<T> for Deconv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, c: usize) -> Self {
        let shape = Shape::new(1, c, 1, 1);
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(shape)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(shape)),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(shape)),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones(shape)),
            eps: T::lit(BN_EPS),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// Normalizes with batch statistics in a training graph and running statistics
    /// otherwise. Training queues running-stat updates on the graph.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        if x.shape().c != self.channels() {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                lhs: x.shape(),
                rhs: self.gamma.value.shape(),
            });
        }
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let (out, stats) = x.batchnorm(&gamma, &beta, &self.running_mean.value, &self.running_var.value, self.eps)?;
        if let (Some(stats), Mode::Train) = (stats, g.mode()) {
            let count = x.shape().b * x.shape().plane();
            let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
            let m = self.momentum;
            let shape = self.gamma.value.shape();
            let mean = Tensor::from_fn(shape, |_, c, _, _| {
                (T::one() - m) * self.running_mean.value.data()[c] + m * stats.mean[c]
            });
            let var = Tensor::from_fn(shape, |_, c, _, _| {
                (T::one() - m) * self.running_var.value.data()[c] + m * stats.var[c] * unbias
            });
            g.set_buffer_update(&self.running_mean.name, mean);
            g.set_buffer_update(&self.running_var.name, var);
        }
        Ok(out)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
