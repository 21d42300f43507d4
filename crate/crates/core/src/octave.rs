//! Octave convolution on paired high/low frequency maps.

use octnet_tensor::{BatchNorm2d, Conv2d, Graph, PoolMode, Scalar, Tensor, UpsampleMode, Var};
use rand::Rng;

use crate::error::{config, CoreError, Result};

/// Channel split of a frequency-divided feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Split {
    pub high: usize,
    pub low: usize,
}

impl Split {
    /// `low = round(alpha * c)`; `alpha` must leave a high map.
    pub fn new(c: usize, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(config(format!("alpha {alpha} outside [0, 1)")));
        }
        let low = (alpha * c as f64).round() as usize;
        if low >= c {
            return Err(config(format!("alpha {alpha} leaves no high channels out of {c}")));
        }
        Ok(Self { high: c - low, low })
    }

    pub fn plain(c: usize) -> Self {
        Self { high: c, low: 0 }
    }

    pub fn total(&self) -> usize {
        self.high + self.low
    }
}

/// A high map and an optional half-resolution low map, as tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OctaveFeature<T> {
    pub high: Tensor<T>,
    pub low: Option<Tensor<T>>,
}

impl<T: Scalar> OctaveFeature<T> {
    pub fn new(high: Tensor<T>, low: Option<Tensor<T>>) -> Result<Self> {
        check_pair(&high, low.as_ref())?;
        Ok(Self { high, low })
    }

    /// Fraction of channels held by the low map.
    pub fn alpha(&self) -> f64 {
        let l = self.low.as_ref().map_or(0, |t| t.shape().c);
        l as f64 / (l + self.high.shape().c) as f64
    }
}

fn check_pair<T: Scalar>(high: &Tensor<T>, low: Option<&Tensor<T>>) -> Result<()> {
    if let Some(low) = low {
        let (h, l) = (high.shape(), low.shape());
        if l.b != h.b || 2 * l.h != h.h || 2 * l.w != h.w {
            return Err(CoreError::Structure(format!(
                "low map {l} is not half of high map {h}"
            )));
        }
    }
    Ok(())
}

/// The graph-side counterpart of [`OctaveFeature`].
#[derive(Clone)]
pub struct OctVar<'g, T> {
    pub high: Var<'g, T>,
    pub low: Option<Var<'g, T>>,
}

impl<'g, T: Scalar> OctVar<'g, T> {
    pub fn new(high: Var<'g, T>, low: Option<Var<'g, T>>) -> Result<Self> {
        check_pair(high.value(), low.as_ref().map(|v| v.value()))?;
        Ok(Self { high, low })
    }

    pub fn plain(high: Var<'g, T>) -> Self {
        Self { high, low: None }
    }

    pub fn constant(g: &'g Graph<T>, f: &OctaveFeature<T>) -> Self {
        Self {
            high: g.constant(f.high.clone()),
            low: f.low.as_ref().map(|l| g.constant(l.clone())),
        }
    }

    pub fn split(&self) -> Split {
        Split {
            high: self.high.shape().c,
            low: self.low.as_ref().map_or(0, |l| l.shape().c),
        }
    }

    pub fn to_feature(&self) -> OctaveFeature<T> {
        OctaveFeature {
            high: self.high.value().clone(),
            low: self.low.as_ref().map(|l| l.value().clone()),
        }
    }

    /// Applies `f` to each present map.
    pub fn map(&self, mut f: impl FnMut(&Var<'g, T>) -> Result<Var<'g, T>>) -> Result<Self> {
        Ok(Self {
            high: f(&self.high)?,
            low: self.low.as_ref().map(&mut f).transpose()?,
        })
    }

    pub fn relu(&self) -> Self {
        Self {
            high: self.high.relu(),
            low: self.low.as_ref().map(|l| l.relu()),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let low = match (&self.low, &other.low) {
            (Some(a), Some(b)) => Some(a.add(b)?),
            (None, None) => None,
            _ => return Err(CoreError::Structure("adding octave features with different splits".into())),
        };
        Ok(Self {
            high: self.high.add(&other.high)?,
            low,
        })
    }

    /// 2x average pooling of both maps.
    pub fn downsample(&self) -> Result<Self> {
        self.map(|v| Ok(v.pool2d(2, PoolMode::Average)?))
    }
}

/// Four-path convolution. Each path is present exactly when both its input and
/// output branch have channels.
#[derive(Clone, Debug)]
pub struct OctaveConv<T> {
    pub hh: Option<Conv2d<T>>,
    pub lh: Option<Conv2d<T>>,
    pub ll: Option<Conv2d<T>>,
    pub hl: Option<Conv2d<T>>,
    pub input: Split,
    pub output: Split,
}

impl<T: Scalar> OctaveConv<T> {
    /// Square kernel `k` with stride 1 and same padding `k / 2`.
    pub fn new(name: &str, input: Split, output: Split, k: usize, rng: &mut impl Rng) -> Self {
        Self::with_stride(name, input, output, k, 1, k / 2, rng)
    }

    /// Same as [`OctaveConv::new`] with an explicit stride and padding applied in
    /// every path.
    pub fn with_stride(name: &str, input: Split, output: Split, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let mut path = |tag: &str, c_in: usize, c_out: usize| {
            (c_in > 0 && c_out > 0).then(|| Conv2d::new(&format!("{name}.{tag}"), c_in, c_out, k, stride, pad, false, rng))
        };
        Self {
            hh: path("hh", input.high, output.high),
            lh: path("lh", input.low, output.high),
            ll: path("ll", input.low, output.low),
            hl: path("hl", input.high, output.low),
            input,
            output,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &OctVar<'g, T>) -> Result<OctVar<'g, T>> {
        let split = x.split();
        if split != self.input {
            return Err(CoreError::Structure(format!(
                "octave conv expects {}+{} channels, got {}+{}",
                self.input.high, self.input.low, split.high, split.low
            )));
        }
        let mut high: Option<Var<'g, T>> = None;
        let mut low: Option<Var<'g, T>> = None;
        let accumulate = |slot: &mut Option<Var<'g, T>>, v: Var<'g, T>| -> Result<()> {
            *slot = Some(match slot.take() {
                Some(acc) => acc.add(&v)?,
                None => v,
            });
            Ok(())
        };
        if let Some(hh) = &self.hh {
            accumulate(&mut high, hh.forward(g, &x.high)?)?;
        }
        if let (Some(lh), Some(xl)) = (&self.lh, &x.low) {
            let y = lh.forward(g, xl)?.upsample(2, UpsampleMode::Nearest)?;
            accumulate(&mut high, y)?;
        }
        if let (Some(ll), Some(xl)) = (&self.ll, &x.low) {
            accumulate(&mut low, ll.forward(g, xl)?)?;
        }
        if let Some(hl) = &self.hl {
            let pooled = x.high.pool2d(2, PoolMode::Average)?;
            accumulate(&mut low, hl.forward(g, &pooled)?)?;
        }
        let high = high.ok_or_else(|| CoreError::Structure("octave conv produced no high map".into()))?;
        OctVar::new(high, low)
    }
}

crate::module_fields!(OctaveConv { hh, lh, ll, hl });

/// Batch norm with separate statistics per frequency branch.
#[derive(Clone, Debug)]
pub struct OctaveBn<T> {
    pub high: BatchNorm2d<T>,
    pub low: Option<BatchNorm2d<T>>,
}

impl<T: Scalar> OctaveBn<T> {
    pub fn new(name: &str, split: Split) -> Self {
        Self {
            high: BatchNorm2d::new(&format!("{name}.h"), split.high),
            low: (split.low > 0).then(|| BatchNorm2d::new(&format!("{name}.l"), split.low)),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &OctVar<'g, T>) -> Result<OctVar<'g, T>> {
        let low = match (&self.low, &x.low) {
            (Some(bn), Some(l)) => Some(bn.forward(g, l)?),
            (None, None) => None,
            _ => return Err(CoreError::Structure("octave batch norm split mismatch".into())),
        };
        Ok(OctVar {
            high: self.high.forward(g, &x.high)?,
            low,
        })
    }
}

crate::module_fields!(OctaveBn { high, low });
