//! The recording tape and the tensor handle that lives on it.
//!
//! Every operation appends a node holding its output value, its parents
//! and (when any parent requires gradients) a backward rule. Nodes are
//! appended in evaluation order, so recording order is a valid topological
//! order and [`Tape::backward`] simply walks the node list in reverse.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{AdError, Result};
use crate::real::Real;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) parents: Vec<usize>,
    pub(crate) backward: Option<BackwardFn<T>>,
    pub(crate) requires_grad: bool,
}

/// Read-only view handed to a backward rule.
pub struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
    node: &'a Node<T>,
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
}

impl<'a, T> BackwardCtx<'a, T> {
    pub fn input(&self, i: usize) -> &'a [T] {
        &self.nodes[self.node.parents[i]].value
    }

    pub fn input_shape(&self, i: usize) -> &'a [usize] {
        &self.nodes[self.node.parents[i]].shape
    }

    pub fn output(&self) -> &'a [T] {
        &self.node.value
    }

    /// Whether parent `i` needs a gradient at all.
    pub fn needs(&self, i: usize) -> bool {
        self.nodes[self.node.parents[i]].requires_grad
    }
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// A define-by-run tape. One tape records one model execution.
pub struct Tape<T> {
    inner: RefCell<Inner<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// New tape. Non-finite op outputs are reported as errors in debug
    /// builds.
    pub fn new() -> Self {
        Self::with_finite_checks(cfg!(debug_assertions))
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that requires gradients.
    pub fn var(&self, shape: &[usize], values: Vec<T>) -> Result<Var<'_, T>> {
        self.leaf(shape, values, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, shape: &[usize], values: Vec<T>) -> Result<Var<'_, T>> {
        self.leaf(shape, values, false)
    }

    pub fn leaf(&self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(AdError::InvalidArgument {
                op: "leaf",
                msg: format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.to_vec(),
            value: values,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    /// Appends an op output. The backward rule is dropped when no parent
    /// requires gradients.
    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[Var<'_, T>],
        backward: F,
    ) -> Result<Var<'_, T>>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite { op });
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = parents.iter().any(|p| inner.nodes[p.id].requires_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(AdError::TapeConsumed);
        }
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(AdError::NonScalarLoss(loss_node.shape.clone()));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = {
                let ctx = BackwardCtx {
                    nodes,
                    node,
                    grad: &g,
                };
                rule(&ctx)
            };
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[pid].value.len());
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Leaves have no backward rule, so they kept what accumulated into them.
        for (id, node) in nodes.iter().enumerate() {
            if !node.parents.is_empty() || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Borrow of the value buffer. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, [T]> {
        Ref::map(self.tape.inner.borrow(), |i| i.nodes[self.id].value.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.value().to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.value()[0]
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }

    /// Runs `f` with the value buffers of several vars borrowed at once.
    pub(crate) fn with_values<R>(vars: &[Var<'t, T>], f: impl FnOnce(&[&[T]]) -> R) -> R {
        let inner = vars[0].tape.inner.borrow();
        let vals: Vec<&[T]> = vars.iter().map(|v| inner.nodes[v.id].value.as_slice()).collect();
        f(&vals)
    }
}
