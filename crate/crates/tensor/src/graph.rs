//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to [`Var`]s in execution order, which is a
//! topological order by construction. [`Graph::backward`] walks the tape once in
//! reverse. An inference graph records nothing and lets intermediates drop early.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::{Param, Scalar, Shape, Tensor};

/// Gradient of one node's output pulled back to each of its inputs. `needs[i]` says
/// whether input `i` wants a gradient; entries for other inputs may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    tracking: bool,
    mode: Mode,
    params: RefCell<HashMap<String, (Option<usize>, Rc<Tensor<T>>, bool)>>,
    buffer_updates: RefCell<Vec<(String, Tensor<T>)>>,
    ops: Cell<usize>,
    macs: Cell<u64>,
}

/// Handle to a value in a [`Graph`]. Cloning is cheap.
#[derive(Clone)]
pub struct Var<'g, T> {
    pub(crate) graph: &'g Graph<T>,
    id: Option<usize>,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph in training mode.
    pub fn new() -> Self {
        Self::with_mode(Mode::Train, true)
    }

    /// A non-recording graph in evaluation mode.
    pub fn inference() -> Self {
        Self::with_mode(Mode::Eval, false)
    }

    pub fn with_mode(mode: Mode, tracking: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracking,
            mode,
            params: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            ops: Cell::new(0),
            macs: Cell::new(0),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    /// Number of ops applied so far, recorded or not.
    pub fn op_count(&self) -> usize {
        self.ops.get()
    }

    /// Multiply-accumulates spent in convolutions so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let requires_grad = requires_grad && self.tracking;
        let id = self.tracking.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value: value.clone(),
                requires_grad,
                inputs: Vec::new(),
                backward: None,
            });
            nodes.len() - 1
        });
        Var {
            graph: self,
            id,
            value,
            requires_grad,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), false)
    }

    /// Leaf for a named parameter. Repeated lookups of the same name return the same
    /// node, so a module applied several times accumulates one gradient.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some((id, value, requires_grad)) = self.params.borrow().get(&p.name) {
            return Var {
                graph: self,
                id: *id,
                value: value.clone(),
                requires_grad: *requires_grad,
            };
        }
        let v = self.push_leaf(Rc::new(p.value.clone()), p.trainable);
        self.params
            .borrow_mut()
            .insert(p.name.clone(), (v.id, v.value.clone(), v.requires_grad));
        v
    }

    /// Records an op with an explicit pullback. Used by every built-in op and open to
    /// callers that need a custom one.
    pub fn custom_op(
        &self,
        value: Tensor<T>,
        inputs: &[&Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<'_, T> {
        self.ops.set(self.ops.get() + 1);
        let requires_grad = self.tracking && inputs.iter().any(|v| v.requires_grad);
        let value = Rc::new(value);
        let id = if requires_grad {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value: value.clone(),
                requires_grad,
                inputs: inputs.iter().map(|v| v.id.filter(|_| v.requires_grad)).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            graph: self,
            id,
            value,
            requires_grad,
        }
    }

    /// Queues a new value for a non-trainable parameter (batch-norm running stats).
    pub fn set_buffer_update(&self, name: &str, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Reverse-mode pass from a scalar loss. Leaves that require a gradient but are
    /// not reached get zeros.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.value.shape()));
        }
        if !loss.value.is_finite() {
            return Err(TensorError::NonFinite(format!("loss = {}", loss.value.data()[0])));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if let (Some(id), true) = (loss.id, loss.requires_grad) {
            grads[id] = Some(Tensor::ones(loss.value.shape()));
            for n in (0..=id).rev() {
                let node = &mut nodes[n];
                let Some(backward) = node.backward.take() else {
                    continue;
                };
                let Some(g) = grads[n].take() else {
                    continue;
                };
                let inputs = node.inputs.clone();
                let needs: Vec<bool> = inputs.iter().map(|i| i.is_some()).collect();
                let pulled = backward(&g, &needs)?;
                if pulled.len() != inputs.len() {
                    return Err(TensorError::invalid(
                        "backward",
                        format!("op returned {} gradients for {} inputs", pulled.len(), inputs.len()),
                    ));
                }
                for (&i, gi) in inputs.iter().zip(pulled) {
                    let (Some(i), Some(gi)) = (i, gi) else {
                        continue;
                    };
                    if gi.shape() != nodes[i].value.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "backward",
                            lhs: gi.shape(),
                            rhs: nodes[i].value.shape(),
                        });
                    }
                    match &mut grads[i] {
                        Some(acc) => acc.add_assign(&gi),
                        slot => *slot = Some(gi),
                    }
                }
            }
        }
        let mut by_node = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.inputs.is_empty() {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_node.insert(i, g);
            }
        }
        let by_param = self
            .params
            .borrow()
            .iter()
            .filter_map(|(name, (id, _, rg))| rg.then_some((name.clone(), (*id)?)))
            .collect();
        Ok(Gradients { by_node, by_param })
    }
}

/// Gradients of the leaves of one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: HashMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id?)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_node.get(self.by_param.get(name)?)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.by_param.keys().map(String::as_str)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }

    /// Records a unary op on `self`.
    pub(crate) fn unary(
        &self,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'static,
    ) -> Var<'g, T> {
        self.graph
            .custom_op(value, &[self], move |g, _| Ok(vec![Some(backward(g)?)]))
    }
}
