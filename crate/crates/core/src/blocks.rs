//! Composite blocks the neck is assembled from.

use octnet_tensor::{BatchNorm2d, Conv2d, Graph, PoolMode, Reduce, Scalar, UpsampleMode, Var};
use rand::Rng;

use crate::error::{config, CoreError, Result};

/// Convolution without bias, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct Cbr<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> Cbr<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, k, stride, pad, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out),
        }
    }

    /// Stride 1 with same padding.
    pub fn same(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self::new(name, c_in, c_out, k, 1, k / 2, rng)
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.conv.forward(g, x)?;
        Ok(self.bn.forward(g, &y)?.relu())
    }
}

crate::module_fields!(Cbr { conv, bn });

/// Biased convolution followed by ReLU, the unit inside inception branches.
fn conv_relu<'g, T: Scalar>(conv: &Conv2d<T>, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(conv.forward(g, x)?.relu())
}

/// Four parallel branches of `c_out / 4` channels each: 1x1; 1x1 then 3x3;
/// 1x1 then 5x5; 3x3 stride-1 max pool then 1x1.
#[derive(Clone, Debug)]
pub struct Inception<T> {
    pub b1: Conv2d<T>,
    pub b3_reduce: Conv2d<T>,
    pub b3: Conv2d<T>,
    pub b5_reduce: Conv2d<T>,
    pub b5: Conv2d<T>,
    pub pool_proj: Conv2d<T>,
}

impl<T: Scalar> Inception<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if c_out == 0 || !c_out.is_multiple_of(4) {
            return Err(config(format!("inception width {c_out} is not a positive multiple of 4")));
        }
        let q = c_out / 4;
        let conv = |tag: &str, ci: usize, k: usize, rng: &mut _| Conv2d::same(&format!("{name}.{tag}"), ci, q, k, true, rng);
        Ok(Self {
            b1: conv("b1", c_in, 1, rng),
            b3_reduce: conv("b3_reduce", c_in, 1, rng),
            b3: conv("b3", q, 3, rng),
            b5_reduce: conv("b5_reduce", c_in, 1, rng),
            b5: conv("b5", q, 5, rng),
            pool_proj: conv("pool_proj", c_in, 1, rng),
        })
    }

    /// Width-preserving block.
    pub fn square(name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(name, c, c, rng)
    }

    pub fn c_out(&self) -> usize {
        4 * self.b1.c_out()
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let a = conv_relu(&self.b1, g, x)?;
        let b = conv_relu(&self.b3, g, &conv_relu(&self.b3_reduce, g, x)?)?;
        let c = conv_relu(&self.b5, g, &conv_relu(&self.b5_reduce, g, x)?)?;
        let pooled = x.window_pool(3, 1, 1, PoolMode::Max)?;
        let d = conv_relu(&self.pool_proj, g, &pooled)?;
        Ok(Var::concat(&[&a, &b, &c, &d])?)
    }
}

crate::module_fields!(Inception { b1, b3_reduce, b3, b5_reduce, b5, pool_proj });

/// Channel gate then spatial gate, both sigmoid.
#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
    pub spatial: Conv2d<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new(name: &str, c: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || c < reduction {
            return Err(config(format!("attention over {c} channels with reduction {reduction}")));
        }
        let hidden = c / reduction;
        Ok(Self {
            fc1: Conv2d::same(&format!("{name}.fc1"), c, hidden, 1, true, rng),
            fc2: Conv2d::same(&format!("{name}.fc2"), hidden, c, 1, true, rng),
            spatial: Conv2d::same(&format!("{name}.spatial"), 2, 1, 7, true, rng),
        })
    }

    /// Reduction ratio used at a given width divisor.
    pub fn reduction_for(width_scale: usize) -> usize {
        if width_scale == 1 {
            16
        } else {
            4
        }
    }

    pub fn channel_gate<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let mlp = |d: Var<'g, T>| -> Result<Var<'g, T>> {
            let h = self.fc1.forward(g, &d)?.relu();
            Ok(self.fc2.forward(g, &h)?)
        };
        let avg = mlp(x.global_pool(Reduce::Mean))?;
        let max = mlp(x.global_pool(Reduce::Max))?;
        Ok(avg.add(&max)?.sigmoid())
    }

    pub fn spatial_gate<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let mean = x.channel_reduce(Reduce::Mean);
        let max = x.channel_reduce(Reduce::Max);
        let stacked = Var::concat(&[&mean, &max])?;
        Ok(self.spatial.forward(g, &stacked)?.sigmoid())
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        if x.shape().c != self.fc1.c_in() {
            return Err(CoreError::Structure(format!(
                "attention built for {} channels got {}",
                self.fc1.c_in(),
                x.shape().c
            )));
        }
        let y = x.mul_broadcast(&self.channel_gate(g, x)?)?;
        Ok(y.mul_broadcast(&self.spatial_gate(g, &y)?)?)
    }
}

crate::module_fields!(Attention { fc1, fc2, spatial });

/// Spatial change applied after a CBR.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Resample {
    Identity,
    /// Bilinear by `2^m`.
    Up(u32),
    /// `m` stride-2 average pools.
    Down(u32),
}

impl Resample {
    /// The resampling taking extent `from` to extent `to`, both powers of two apart.
    pub fn between(from: usize, to: usize) -> Result<Self> {
        let ratio = |a: usize, b: usize| -> Result<u32> {
            if b == 0 || !a.is_multiple_of(b) || !(a / b).is_power_of_two() {
                return Err(CoreError::Structure(format!("extents {from} and {to} are not a power of two apart")));
            }
            Ok((a / b).trailing_zeros())
        };
        Ok(match from.cmp(&to) {
            std::cmp::Ordering::Equal => Resample::Identity,
            std::cmp::Ordering::Less => Resample::Up(ratio(to, from)?),
            std::cmp::Ordering::Greater => Resample::Down(ratio(from, to)?),
        })
    }

    pub fn apply<'g, T: Scalar>(&self, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        match *self {
            Resample::Identity => Ok(x.clone()),
            Resample::Up(m) => Ok(x.upsample(1 << m, UpsampleMode::Bilinear)?),
            Resample::Down(m) => {
                let mut y = x.clone();
                for _ in 0..m {
                    y = y.pool2d(2, PoolMode::Average)?;
                }
                Ok(y)
            }
        }
    }
}

/// A 1x1 CBR followed by a [`Resample`].
#[derive(Clone, Debug)]
pub struct ResampleBlock<T> {
    pub cbr: Cbr<T>,
    pub resample: Resample,
}

impl<T: Scalar> ResampleBlock<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, resample: Resample, rng: &mut impl Rng) -> Result<Self> {
        if matches!(resample, Resample::Up(0) | Resample::Down(0)) {
            return Err(config("resample factor exponent must be at least 1"));
        }
        Ok(Self {
            cbr: Cbr::same(&format!("{name}.cbr"), c_in, c_out, 1, rng),
            resample,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        if let Resample::Down(m) = self.resample {
            // Fail before any compute.
            let f = 1usize << m;
            let s = x.shape();
            if !s.h.is_multiple_of(f) || !s.w.is_multiple_of(f) {
                return Err(config(format!("cannot downsample {}x{} by {f}", s.h, s.w)));
            }
        }
        self.resample.apply(&self.cbr.forward(g, x)?)
    }
}

crate::module_fields!(ResampleBlock { cbr });

#[cfg(test)]
mod tests {
    use super::*;
    use octnet_tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resample_between_extents() {
        assert_eq!(Resample::between(8, 8).unwrap(), Resample::Identity);
        assert_eq!(Resample::between(4, 16).unwrap(), Resample::Up(2));
        assert_eq!(Resample::between(32, 8).unwrap(), Resample::Down(2));
        assert!(Resample::between(12, 8).is_err());
    }

    #[test]
    fn inception_rejects_indivisible_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Inception::<f64>::square("i", 6, &mut rng).is_err());
    }

    #[test]
    fn attention_rejects_narrow_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Attention::<f64>::new("a", 3, 4, &mut rng).is_err());
        assert_eq!(Attention::<f64>::reduction_for(1), 16);
        assert_eq!(Attention::<f64>::reduction_for(8), 4);
    }

    #[test]
    fn down_resample_checks_extent_before_compute() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ResampleBlock::<f64>::new("r", 2, 2, Resample::Down(2), &mut rng).unwrap();
        let g = Graph::inference();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 6, 8)));
        assert!(block.forward(&g, &x).is_err());
        assert_eq!(g.macs(), 0);
    }
}
