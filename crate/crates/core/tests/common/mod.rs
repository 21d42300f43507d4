#![allow(dead_code)]

use octnet_tensor::{Scalar, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL64: f64 = 1e-6;
pub const EPS64: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rnd<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    Tensor::seeded_randn(shape, seed)
}

/// Random weighted sum, so losses are not flattened by normalization.
pub fn probe<'g>(v: &Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    v.dot_const(&rnd(v.shape(), seed)).unwrap()
}

/// Spatial extents (h, w) of a shape.
pub fn hw(s: Shape) -> (usize, usize) {
    (s.h, s.w)
}
