//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Every primitive in [`crate::ops`] records one node on a [`Tape`] holding
//! its output value, its parents and a closure mapping the output gradient
//! to parent gradients. Recording order is a topological order, so
//! [`Var::backward`] is a single reverse sweep over the node list.
//!
//! Nodes whose parents all have `requires_grad = false` store no closure
//! and never receive a gradient; this is how frozen parameters stay frozen.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per parent. The
/// `needs` slice tells the closure which parents actually want a gradient.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

/// One recording of a forward pass. Single-threaded; build a fresh tape per
/// training step.
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Registers an input tensor. Leaves with `requires_grad` receive a
    /// gradient on backward.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        let id = self.push(Node {
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    /// Records the application of a primitive. `backward` is dropped
    /// without being stored when no parent requires a gradient.
    pub fn record(
        op: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<T>> {
        let tape = parents
            .first()
            .map(|p| p.tape.clone())
            .ok_or(TensorError::InvalidArgument {
                op,
                detail: "primitive recorded without inputs".into(),
            })?;
        if parents.iter().any(|p| !p.tape.same_as(&tape)) {
            return Err(TensorError::TapeMismatch { op });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad);
        let id = tape.push(Node {
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        });
        Ok(Var {
            tape,
            id,
            value,
            requires_grad,
        })
    }
}

/// A tensor registered on a tape.
#[derive(Clone)]
pub struct Var<T> {
    tape: Tape<T>,
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Gradient accumulated by [`Var::backward`]. Only leaves keep their
    /// gradient; intermediate gradients are released during the sweep.
    pub fn grad(&self) -> Option<Tensor<T>> {
        if !self.requires_grad {
            return None;
        }
        self.tape.inner.borrow().grads[self.id].clone()
    }

    /// Back-propagates from this scalar through everything recorded before
    /// it. A tape can be swept only once.
    pub fn backward(&self) -> Result<()> {
        if self.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.value.shape().to_vec()));
        }
        let mut inner = self.tape.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.consumed = true;
        if !self.requires_grad {
            return Ok(());
        }
        inner.grads[self.id] = Some(Tensor::full(self.value.shape(), T::one()));

        let TapeInner { nodes, grads, .. } = &mut *inner;
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Non-leaf gradient is no longer needed once propagated.
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                grads[p] = Some(match grads[p].take() {
                    None => pg,
                    Some(acc) => acc.add(&pg).expect("gradient shapes agree"),
                });
            }
        }
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("requires_grad", &self.requires_grad)
            .field("value", &self.value)
            .finish()
    }
}
