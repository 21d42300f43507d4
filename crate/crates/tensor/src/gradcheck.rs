//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{LeafSet, Module, Param};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Checks at most this many coordinates per param, chosen with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Mode of every graph built during the check.
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            max_coords: None,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval_loss<T: Scalar, M: Module<T>, E: From<TensorError>>(
    module: &M,
    mode: Mode,
    loss_fn: &impl for<'g> Fn(&'g Graph<T>, &M) -> std::result::Result<Var<'g, T>, E>,
) -> std::result::Result<f64, E> {
    let g = Graph::with_mode(mode, false);
    let loss = loss_fn(&g, module)?;
    if loss.value().numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape()).into());
    }
    let v = loss.value().data()[0].as_f64();
    if !v.is_finite() {
        return Err(TensorError::NonFinite(format!("loss = {v}")).into());
    }
    Ok(v)
}

fn set_coord<T: Scalar>(module: &mut impl Module<T>, name: &str, index: usize, value: T) {
    module.visit_mut(&mut |p| {
        if p.name == name {
            p.value.data_mut()[index] = value;
        }
    });
}

/// Compares backward gradients of every trainable param of `module` against central
/// differences of `loss_fn`. Any error type that wraps [`TensorError`] can flow
/// through.
pub fn grad_check_module<T, M, E, F>(
    module: &mut M,
    eps: f64,
    opts: &GradCheckOptions,
    loss_fn: F,
) -> std::result::Result<GradCheckReport, E>
where
    T: Scalar,
    M: Module<T>,
    E: From<TensorError>,
    F: for<'g> Fn(&'g Graph<T>, &M) -> std::result::Result<Var<'g, T>, E>,
{
    if !(eps > 0.0) {
        return Err(TensorError::invalid("grad_check", "eps must be positive").into());
    }
    let analytic: Vec<(String, Tensor<T>, Tensor<T>)> = {
        let g = Graph::with_mode(opts.mode, true);
        let loss = loss_fn(&g, module)?;
        let grads = g.backward(&loss)?;
        let mut out = Vec::new();
        module.visit(&mut |p| {
            if p.trainable {
                let grad = grads.param(&p.name).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                out.push((p.name.clone(), p.value.clone(), grad));
            }
        });
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (name, value, grad) in &analytic {
        let n = value.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = value.data()[i];
            set_coord(module, name, i, T::lit(x0.as_f64() + eps));
            let plus = eval_loss(module, opts.mode, &loss_fn);
            set_coord(module, name, i, T::lit(x0.as_f64() - eps));
            let minus = eval_loss(module, opts.mode, &loss_fn);
            set_coord(module, name, i, x0);
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.data()[i].as_f64();
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Checks a closure over loose leaf tensors; returns the max relative error.
pub fn grad_check<T, F>(leaves: &[Tensor<T>], eps: f64, builder: F) -> Result<f64>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let mut set = LeafSet(
        leaves
            .iter()
            .enumerate()
            .map(|(i, t)| Param::new(format!("leaf{i}"), t.clone()))
            .collect(),
    );
    let report = grad_check_module(&mut set, eps, &GradCheckOptions::default(), |g, set: &LeafSet<T>| {
        let vars: Vec<Var<'_, T>> = set.0.iter().map(|p| g.param(p)).collect();
        builder(g, &vars)
    })?;
    Ok(report.max_rel_error)
}

/// Wraps a module so its input tensor is checked alongside its params.
pub struct WithInput<'m, T, M> {
    pub module: &'m mut M,
    pub input: Param<T>,
}

impl<'m, T: Scalar, M: Module<T>> WithInput<'m, T, M> {
    pub fn new(module: &'m mut M, input: Tensor<T>) -> Self {
        Self {
            module,
            input: Param::new("input", input),
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for WithInput<'_, T, M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.input);
        self.module.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.input);
        self.module.visit_mut(f);
    }
}

/// Replaces every `*.bias` param with small seeded noise. Zero-initialized biases
/// put ReLU inputs exactly on the kink wherever a window sees only zeros, where
/// central differences are meaningless.
pub fn randomize_biases<T: Scalar>(module: &mut impl Module<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    module.visit_mut(&mut |p| {
        if p.trainable && p.name.ends_with(".bias") {
            p.value = Tensor::randn(p.value.shape(), 0.1, &mut rng);
        }
    });
}
