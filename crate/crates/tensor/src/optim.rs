//! Stochastic gradient descent with momentum.

use std::collections::HashMap;

use crate::graph::Gradients;
use crate::nn::Module;
use crate::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// `v = momentum * v + (grad + wd * w)`, then `w -= lr * v`. Params without a
    /// gradient (unused in the pass) are left alone.
    pub fn step(&mut self, module: &mut impl Module<T>, grads: &Gradients<T>) {
        self.step_scaled(module, grads, 1.0);
    }

    /// [`Sgd::step`] with every gradient multiplied by `scale` first.
    pub fn step_scaled(&mut self, module: &mut impl Module<T>, grads: &Gradients<T>, scale: f64) {
        let (lr, mu, wd, gs) = (T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay), T::lit(scale));
        let velocity = &mut self.velocity;
        module.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let Some(g) = grads.param(&p.name) else {
                return;
            };
            let v = velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vi = mu * *vi + gs * gi + wd * *wi;
                *wi = *wi - lr * *vi;
            }
        });
    }
}

/// Euclidean norm over the gradients of every trainable param of `module`.
pub fn grad_norm<T: Scalar>(module: &impl Module<T>, grads: &Gradients<T>) -> f64 {
    let mut sq = 0.0;
    module.visit(&mut |p| {
        if let (true, Some(g)) = (p.trainable, grads.param(&p.name)) {
            sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    });
    sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::{LeafSet, Param};
    use crate::Shape;

    #[test]
    fn momentum_accumulates() {
        let mut leaves = LeafSet(vec![Param::new("w", Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 1.0))]);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        let mut seen = Vec::new();
        for _ in 0..2 {
            let g = Graph::new();
            let w = g.param(&leaves.0[0]);
            let grads = g.backward(&w.sum()).unwrap();
            opt.step(&mut leaves, &grads);
            seen.push(leaves.0[0].value.data()[0]);
        }
        assert!((seen[0] - 0.9).abs() < 1e-12);
        assert!((seen[1] - (0.9 - 0.1 * 1.9)).abs() < 1e-12);
    }
}
