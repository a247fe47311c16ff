//! Explicit, per-forward-pass reverse-mode differentiation tape.
//!
//! Every differentiable operation appends a node holding its output value,
//! the ids of its inputs and a backward closure mapping the upstream gradient
//! to one gradient per input. [`Tape::backward`] walks the nodes in reverse
//! recording order exactly once, accumulating gradients additively where a
//! value fans out.
//!
//! Contract: `backward` does not consume or mutate the tape. Each call starts
//! from zero gradients and returns a fresh [`Gradients`]; callers that want
//! accumulation across calls do it explicitly with
//! [`Gradients::accumulate_into`].
//!
//! The tape also carries an operation counter: each op reports the
//! floating point work of its forward kernel (one multiply-accumulate counts
//! as two operations), which is what the empirical FLOPs counter reads.

use std::cell::{Cell, RefCell};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    finite: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<IndexMap<String, usize>>,
    flops: Cell<u64>,
    check_finite: bool,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Finiteness of every op output is asserted in debug builds.
    pub fn new() -> Self {
        Self::with_finite_check(cfg!(debug_assertions))
    }

    pub fn with_finite_check(check_finite: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(IndexMap::new()),
            flops: Cell::new(0),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operations counted by the forward kernels recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn reset_flops(&self) {
        self.flops.set(0);
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Registers a named trainable parameter. Registering the same name twice
    /// returns the original handle, so a parameter used at several places has
    /// a single gradient entry.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { tape: self, id };
        }
        let var = self.push_leaf(value.clone(), true);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        var
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let finite = !self.check_finite || value.all_finite();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            finite,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an op output. `backward` receives the upstream gradient (same
    /// shape as `value`) and returns one optional gradient per parent, in
    /// order. It is only kept when some parent requires a gradient.
    pub(crate) fn record<F>(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        flops: u64,
        backward: F,
    ) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        self.flops.set(self.flops.get() + flops);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        let finite = if self.check_finite {
            let inputs_finite = parents.iter().all(|p| nodes[p.id].finite);
            let out_finite = value.all_finite();
            assert!(
                !inputs_finite || out_finite,
                "non-finite output {:?} from finite inputs at tape node {}",
                value.shape(),
                nodes.len()
            );
            out_finite
        } else {
            true
        };
        nodes.push(Node {
            value,
            requires_grad,
            finite,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            pending[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let grad = Tensor::from_parts(node.value.shape().to_vec(), grad);
            match &node.backward {
                Some(backward) => {
                    let parent_grads = backward(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[pid].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                        match &mut pending[pid] {
                            Some(acc) => {
                                for (a, &g) in acc.iter_mut().zip(pg.data()) {
                                    *a = *a + g;
                                }
                            }
                            slot @ None => *slot = Some(pg.into_vec()),
                        }
                    }
                }
                None => leaves[id] = Some(grad),
            }
        }
        Ok(Gradients {
            grads: leaves,
            params: self.params.borrow().clone(),
        })
    }

    /// Names of registered parameters in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.borrow().keys().cloned().collect()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Gradients of one backward pass, for every leaf that requires a gradient
/// and was reached from the loss.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .get(name)
            .and_then(|&id| self.grads.get(id))
            .and_then(Option::as_ref)
    }

    /// `(name, gradient)` for registered parameters that received one.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().filter_map(|(name, &id)| {
            self.grads
                .get(id)
                .and_then(Option::as_ref)
                .map(|g| (name.as_str(), g))
        })
    }

    /// Adds the parameter gradients into an explicit accumulator.
    pub fn accumulate_into(&self, acc: &mut IndexMap<String, Tensor<T>>) {
        for (name, g) in self.params() {
            match acc.get_mut(name) {
                Some(existing) => {
                    for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => {
                    acc.insert(name.to_string(), g.clone());
                }
            }
        }
    }
}
