use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::array::Tensor;
use crate::tensor::ops::{self, Op};

pub type NodeId = usize;

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records primitive operations in execution order so that a single
/// reverse sweep can propagate adjoints.
///
/// Nodes are appended only after all of their parents exist, so node order is
/// a topological order. A tape is not `Sync`: each thread builds its own.
pub struct Tape<T> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    fault: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.borrow().len()).finish()
    }
}

/// Differentiable handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: NodeId,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            fault: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient on [`Tape::backward`].
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Negative-control switch: when set, the matrix-product backward rule
    /// deliberately returns a wrong left-operand gradient.
    pub fn inject_backward_fault(&self, on: bool) {
        self.fault.set(on);
    }

    pub(crate) fn fault(&self) -> bool {
        self.fault.get()
    }

    pub(crate) fn push(&self, name: &'static str, value: Tensor<T>, op: Op, parents: &[NodeId]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value, op, requires_grad });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`. Gradients of `requires_grad` leaves
    /// are added to whatever they already hold.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let mut grads = self.grads.borrow_mut();
                if grads.len() < nodes.len() {
                    grads.resize_with(nodes.len(), || None);
                }
                match &mut grads[id] {
                    Some(t) => {
                        for (d, s) in t.data_mut().iter_mut().zip(&g) {
                            *d = T::c(d.real() + s);
                        }
                    }
                    slot @ None => {
                        let data = g.iter().map(|&v| T::c(v)).collect();
                        *slot = Some(Tensor::new(node.value.shape(), data)?);
                    }
                }
                continue;
            }
            ops::backward_node(&nodes, id, &g, self.fault(), &mut |pid, contrib| {
                if !nodes[pid].requires_grad {
                    return;
                }
                match &mut adj[pid] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    pub(crate) fn grad_of(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.borrow().get(id).cloned().flatten()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Borrow the value without cloning. Do not record new ops while the
    /// borrow is alive.
    pub fn value_ref(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad_of(self.id)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }
}
