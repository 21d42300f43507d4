use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};
use crate::Scalar;

/// Extents of a rank-4 `(batch, channels, height, width)` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.b == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(TensorError::invalid("shape", format!("extents must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array stored row-major in `(b, c, h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.numel() > 0, "tensor extents must be >= 1, got {shape}");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Self::new(shape, data).expect("from_fn produces a consistent buffer")
    }

    /// Standard-normal entries scaled by `std`, drawn in `f64` so both precisions see
    /// the same values up to rounding.
    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self::new(shape, data).expect("randn buffer matches shape")
    }

    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| T::lit(rng.random_range(lo..hi))).collect();
        Self::new(shape, data).expect("uniform buffer matches shape")
    }

    /// Seeded standard-normal tensor; convenience for fixtures.
    pub fn seeded_randn(shape: Shape, seed: u64) -> Self {
        Self::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((b * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(b, c, y, x);
        self.data[o] = v;
    }

    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Channels `start..start + len` of every batch item.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(TensorError::invalid(
                "slice_channels",
                format!("range {start}..{} outside {} channels", start + len, s.c),
            ));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.b * len * plane);
        for b in 0..s.b {
            let base = (b * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Self::new(s.with_c(len), data)
    }

    /// Channel-axis concatenation in argument order.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "empty input list"))?
            .shape;
        let mut c_total = 0;
        for (index, p) in parts.iter().enumerate() {
            let s = p.shape;
            if s.b != first.b || s.h != first.h || s.w != first.w {
                return Err(TensorError::ConcatMismatch {
                    op: "concat",
                    index,
                    found: s,
                    expected: first,
                });
            }
            c_total += s.c;
        }
        let plane = first.plane();
        let mut data = Vec::with_capacity(first.b * c_total * plane);
        for b in 0..first.b {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        debug_assert_eq!(data.len(), first.b * c_total * plane);
        Self::new(first.with_c(c_total), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_zero_extents() {
        assert!(Tensor::<f64>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(Shape::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn concat_shapes_add_channels() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor::<f64>::ones(Shape::new(1, 3, 4, 4));
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 5, 4, 4));
        let single = Tensor::concat_channels(&[&a]).unwrap();
        assert_eq!(single, a);
    }

    #[test]
    fn concat_names_offending_index() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let bad = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 4));
        match Tensor::concat_channels(&[&a, &b, &bad]) {
            Err(TensorError::ConcatMismatch { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
